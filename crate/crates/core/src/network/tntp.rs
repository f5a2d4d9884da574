//! Parser for the TNTP tabular network format: a metadata header of
//! `<KEY> value` lines, a link table with ten whitespace-separated columns
//! (init node, term node, capacity, length, free-flow time, B, power, speed
//! limit, toll, link type), and a trips file of `Origin` blocks whose cells
//! read `destination : flow ;`. Comment lines start with `~`.

use super::{Link, Network, NetworkError, TravelerClass};

fn parse_err(file: &'static str, line: usize, message: impl Into<String>) -> NetworkError {
    NetworkError::Parse { file, line, message: message.into() }
}

fn parse_f64(
    file: &'static str,
    line: usize,
    field: &str,
    raw: &str,
) -> Result<f64, NetworkError> {
    raw.parse::<f64>()
        .map_err(|_| parse_err(file, line, format!("non-numeric {field} `{raw}`")))
}

fn parse_node(
    file: &'static str,
    line: usize,
    field: &str,
    raw: &str,
) -> Result<usize, NetworkError> {
    raw.parse::<usize>()
        .map_err(|_| parse_err(file, line, format!("non-numeric {field} `{raw}`")))
}

/// Strips a trailing `~` comment and surrounding whitespace.
fn significant(line: &str) -> &str {
    match line.find('~') {
        Some(pos) => line[..pos].trim(),
        None => line.trim(),
    }
}

fn metadata_value<'a>(line: &'a str) -> Option<(&'a str, &'a str)> {
    let rest = line.strip_prefix('<')?;
    let end = rest.find('>')?;
    Some((rest[..end].trim(), rest[end + 1..].trim()))
}

/// Loads a network and its trips table from TNTP-formatted text.
///
/// Classes are created per positive-demand OD pair, ordered by (origin,
/// destination), named `od_{origin}_{destination}`, with empty route sets;
/// route enumeration is a separate step. Zero-demand and intrazonal cells are
/// dropped. Errors carry the offending line number.
pub fn load_tntp(net_text: &str, trips_text: &str) -> Result<Network, NetworkError> {
    const NET: &str = "network";
    const TRIPS: &str = "trips";

    let mut num_nodes: Option<usize> = None;
    let mut declared_links: Option<usize> = None;
    let mut links: Vec<Link> = Vec::new();

    for (idx, raw) in net_text.lines().enumerate() {
        let lineno = idx + 1;
        let line = significant(raw);
        if line.is_empty() {
            continue;
        }
        if line.starts_with('<') {
            let (key, value) = metadata_value(line)
                .ok_or_else(|| parse_err(NET, lineno, "malformed metadata header"))?;
            match key.to_ascii_uppercase().as_str() {
                "NUMBER OF NODES" => {
                    num_nodes = Some(parse_node(NET, lineno, "node count", value)?);
                }
                "NUMBER OF LINKS" => {
                    declared_links = Some(parse_node(NET, lineno, "link count", value)?);
                }
                _ => {}
            }
            continue;
        }
        let row = line.trim_end_matches(';').trim();
        let cols: Vec<&str> = row.split_whitespace().collect();
        if cols.len() < 10 {
            return Err(parse_err(
                NET,
                lineno,
                format!("link row has {} columns, expected 10", cols.len()),
            ));
        }
        let id = links.len();
        let link = Link {
            id,
            tail: parse_node(NET, lineno, "init node", cols[0])?,
            head: parse_node(NET, lineno, "term node", cols[1])?,
            capacity: parse_f64(NET, lineno, "capacity", cols[2])?,
            free_flow_time: parse_f64(NET, lineno, "free-flow time", cols[4])?,
            bpr_alpha: parse_f64(NET, lineno, "B", cols[5])?,
            bpr_beta: parse_f64(NET, lineno, "power", cols[6])?,
            toll: parse_f64(NET, lineno, "toll", cols[8])?,
        };
        if !(link.capacity > 0.0) {
            return Err(parse_err(
                NET,
                lineno,
                format!("link capacity must be positive, got {}", link.capacity),
            ));
        }
        links.push(link);
    }

    let num_nodes = num_nodes
        .ok_or_else(|| parse_err(NET, 1, "missing <NUMBER OF NODES> metadata"))?;
    if let Some(declared) = declared_links {
        if declared != links.len() {
            return Err(parse_err(
                NET,
                1,
                format!("<NUMBER OF LINKS> declares {declared}, table has {}", links.len()),
            ));
        }
    }

    let mut demands: Vec<((usize, usize), f64)> = Vec::new();
    let mut origin: Option<usize> = None;
    for (idx, raw) in trips_text.lines().enumerate() {
        let lineno = idx + 1;
        let line = significant(raw);
        if line.is_empty() || line.starts_with('<') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("Origin") {
            origin = Some(parse_node(TRIPS, lineno, "origin", rest.trim())?);
            continue;
        }
        let o = origin.ok_or_else(|| parse_err(TRIPS, lineno, "cell before any Origin"))?;
        for cell in line.split(';') {
            let cell = cell.trim();
            if cell.is_empty() {
                continue;
            }
            let (dest, flow) = cell
                .split_once(':')
                .ok_or_else(|| parse_err(TRIPS, lineno, format!("malformed cell `{cell}`")))?;
            let d = parse_node(TRIPS, lineno, "destination", dest.trim())?;
            let v = parse_f64(TRIPS, lineno, "flow", flow.trim())?;
            if v < 0.0 {
                return Err(parse_err(TRIPS, lineno, format!("negative demand {v}")));
            }
            if v > 0.0 && d != o {
                demands.push(((o, d), v));
            }
        }
    }
    demands.sort_by_key(|&((o, d), _)| (o, d));

    let classes = demands
        .into_iter()
        .map(|((o, d), v)| TravelerClass {
            name: format!("od_{o}_{d}"),
            origin: o,
            destination: d,
            demand: v,
            routes: Vec::new(),
        })
        .collect();

    let net = Network { num_nodes, links, classes };
    net.validate()?;
    Ok(net)
}

//! Synthetic rectangular grid networks.

use super::{build_network, Compass, LinkSpec, Movement, NetError, NodeSpec, Point, RoadNetwork, RoadSpec};

/// Heading encoding used in road ids, matching the usual grid convention:
/// 0 = east, 1 = north, 2 = west, 3 = south.
fn dir_code(heading: Compass) -> usize {
    match heading {
        Compass::East => 0,
        Compass::North => 1,
        Compass::West => 2,
        Compass::South => 3,
    }
}

fn step(x: i64, y: i64, heading: Compass) -> (i64, i64) {
    match heading {
        Compass::East => (x + 1, y),
        Compass::North => (x, y + 1),
        Compass::West => (x - 1, y),
        Compass::South => (x, y - 1),
    }
}

fn node_id(x: i64, y: i64) -> String {
    format!("intersection_{x}_{y}")
}

fn road_id(x: i64, y: i64, heading: Compass) -> String {
    format!("road_{x}_{y}_{}", dir_code(heading))
}

/// Builds a `rows` x `cols` grid of four-way signalized intersections with
/// `lane_length` meters between neighbors, ringed by virtual boundary nodes.
/// Every internal road pair is bidirectional and every incoming road carries
/// through, left and right movement lanes.
pub fn synth_grid(rows: usize, cols: usize, lane_length: f64) -> Result<RoadNetwork, NetError> {
    if rows == 0 || cols == 0 {
        return Err(NetError::Topology("grid needs at least one row and one column".into()));
    }
    if !(lane_length > 0.0) {
        return Err(NetError::Topology("grid lane_length must be positive".into()));
    }
    let (rows, cols) = (rows as i64, cols as i64);
    let pos = |x: i64, y: i64| Point {
        x: x as f64 * lane_length,
        y: y as f64 * lane_length,
    };
    let interior = |x: i64, y: i64| (1..=cols).contains(&x) && (1..=rows).contains(&y);

    let mut nodes = Vec::new();
    let mut roads = Vec::new();
    let mut links = Vec::new();

    for y in 1..=rows {
        for x in 1..=cols {
            nodes.push(NodeSpec {
                id: node_id(x, y),
                pos: pos(x, y),
                controlled: true,
            });
        }
    }
    // Boundary ring: one virtual node beyond each edge intersection.
    for x in 1..=cols {
        for y in [0, rows + 1] {
            nodes.push(NodeSpec {
                id: node_id(x, y),
                pos: pos(x, y),
                controlled: false,
            });
        }
    }
    for y in 1..=rows {
        for x in [0, cols + 1] {
            nodes.push(NodeSpec {
                id: node_id(x, y),
                pos: pos(x, y),
                controlled: false,
            });
        }
    }

    // Outgoing roads: four per intersection, one per virtual node (back into
    // the grid). Between neighboring intersections this yields both
    // directions exactly once.
    for y in 1..=rows {
        for x in 1..=cols {
            for heading in Compass::ALL {
                let (nx, ny) = step(x, y, heading);
                roads.push(RoadSpec {
                    id: road_id(x, y, heading),
                    from: node_id(x, y),
                    to: node_id(nx, ny),
                    points: vec![pos(x, y), pos(nx, ny)],
                });
                if !interior(nx, ny) {
                    roads.push(RoadSpec {
                        id: road_id(nx, ny, heading.opposite()),
                        from: node_id(nx, ny),
                        to: node_id(x, y),
                        points: vec![pos(nx, ny), pos(x, y)],
                    });
                }
            }
        }
    }

    // Turning movements at every controlled intersection.
    for road in &roads {
        let Some((x, y)) = parse_node(&road.to) else { continue };
        if !interior(x, y) {
            continue;
        }
        let heading = heading_of(road);
        for movement in Movement::ALL {
            links.push(LinkSpec {
                road: road.id.clone(),
                movement,
                end_road: road_id(x, y, heading.turn(movement)),
            });
        }
    }

    build_network(nodes, roads, links)
}

fn parse_node(id: &str) -> Option<(i64, i64)> {
    let rest = id.strip_prefix("intersection_")?;
    let (x, y) = rest.split_once('_')?;
    Some((x.parse().ok()?, y.parse().ok()?))
}

fn heading_of(road: &RoadSpec) -> Compass {
    let (a, b) = (road.points[0], road.points[1]);
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    if dx.abs() >= dy.abs() {
        if dx >= 0.0 {
            Compass::East
        } else {
            Compass::West
        }
    } else if dy >= 0.0 {
        Compass::North
    } else {
        Compass::South
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_intersection_grid_has_standard_lane_layout() {
        let net = synth_grid(1, 1, 300.0).unwrap();
        assert_eq!(net.intersections.len(), 1);
        let incoming: Vec<_> = net
            .lanes
            .iter()
            .filter(|l| l.approach.is_some())
            .collect();
        assert_eq!(incoming.len(), 12);
        assert_eq!(incoming.iter().filter(|l| l.controlled).count(), 8);
        assert_eq!(net.lanes.iter().filter(|l| l.approach.is_none()).count(), 4);
        for lane in &net.lanes {
            assert_eq!(lane.length, 300.0);
            assert_eq!(lane.segment_count, 3);
        }
    }

    #[test]
    fn grid_dimensions_multiply() {
        let net = synth_grid(3, 4, 300.0).unwrap();
        assert_eq!(net.intersections.len(), 12);
        // 12 intersections x 4 outgoing + one inbound road per ring node.
        assert_eq!(net.boundary_nodes.len(), 2 * 3 + 2 * 4);
        assert_eq!(net.roads.len(), 12 * 4 + 14);
    }

    #[test]
    fn interior_lanes_have_downstream_roads_and_exits_none() {
        let net = synth_grid(2, 2, 300.0).unwrap();
        for lane in &net.lanes {
            if lane.approach.is_some() {
                let down = lane.downstream_road.expect("incoming lanes continue somewhere");
                assert_eq!(net.roads[down].from, net.roads[lane.road].to);
            } else {
                assert!(lane.downstream_road.is_none());
            }
        }
    }

    #[test]
    fn degenerate_grids_are_rejected() {
        assert!(synth_grid(0, 3, 300.0).is_err());
        assert!(synth_grid(2, 2, 0.0).is_err());
    }

    #[test]
    fn through_lane_from_east_heads_west() {
        let net = synth_grid(1, 1, 300.0).unwrap();
        let inter = &net.intersections[0];
        let lane = inter.incoming[&(Compass::East, Movement::Through)];
        let down = net.lanes[lane].downstream_road.unwrap();
        // Continuing through from the eastern approach leaves on the west road.
        assert_eq!(net.roads[down].id, road_id(1, 1, Compass::West));
    }
}

//! Road network of the two-entry roundabout, modelled as 1D routes over
//! shared segments.
//!
//! Every segment owns a fixed start coordinate in a single absolute frame, so
//! two routes that share a segment report identical frame coordinates there.
//! The west route defines the frame: its origin is coordinate 0 and its
//! terminus is the frame span. Segments that only appear on the north route
//! are laid out backwards from the first segment it shares with the west
//! route.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type SegmentId = usize;

#[derive(Debug, Error, PartialEq)]
pub enum NetworkError {
    #[error("segment `{0}` must have a positive length")]
    NonPositiveLength(String),
    #[error("segment `{from}` lists unknown successor `{to}`")]
    UnknownSuccessor { from: String, to: String },
    #[error("route {route} references unknown segment `{segment}`")]
    UnknownSegment { route: RouteId, segment: String },
    #[error("route {route} is not contiguous: `{to}` is not a successor of `{from}`")]
    Discontiguous { route: RouteId, from: String, to: String },
    #[error("roundabout segments do not form a single directed cycle")]
    NotACycle,
    #[error("routes must share their final (exit) segment")]
    NoSharedExit,
    #[error("route {route} must start on an entry segment outside the roundabout")]
    EntryInsideRoundabout { route: RouteId },
    #[error("route {route} does not cross the roundabout")]
    MissesRoundabout { route: RouteId },
    #[error("frame coordinates of route {0} are not strictly increasing")]
    NonMonotoneFrame(RouteId),
    #[error("duplicate segment name `{0}`")]
    DuplicateSegment(String),
    #[error("derived exit length {0} m is not positive; enlarge frame_length")]
    NonPositiveExit(f64),
    #[error("progress {progress} m is outside route {route} (0..={total})")]
    ProgressOutOfRange { route: RouteId, progress: f64, total: f64 },
}

/// The two routes through the roundabout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RouteId {
    /// Enters from the north, merges onto the circle and leaves through the west exit.
    North,
    /// Enters from the west, makes a U-turn around the circle and leaves west.
    West,
}

impl RouteId {
    pub const ALL: [RouteId; 2] = [RouteId::North, RouteId::West];

    pub fn index(self) -> usize {
        match self {
            RouteId::North => 0,
            RouteId::West => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RouteId::North => "north",
            RouteId::West => "west",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "north" => Some(RouteId::North),
            "west" => Some(RouteId::West),
            _ => None,
        }
    }
}

impl fmt::Display for RouteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub id: SegmentId,
    pub name: String,
    pub length: f64,
    pub successors: Vec<SegmentId>,
    /// Absolute frame coordinate of the segment start.
    pub frame_start: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub id: RouteId,
    pub segments: Vec<SegmentId>,
    /// Route progress at which each member segment starts.
    pub starts: Vec<f64>,
    pub total_length: f64,
}

impl Route {
    /// Index into `segments` of the segment holding `progress`. Segments are
    /// half-open `[start, end)`; the route terminus belongs to the last one.
    pub fn segment_index(&self, progress: f64) -> usize {
        match self.starts.iter().rposition(|&s| s <= progress) {
            Some(i) => i,
            None => 0,
        }
    }

    pub fn position_of(&self, segment: SegmentId) -> Option<usize> {
        self.segments.iter().position(|&s| s == segment)
    }
}

/// Where a vehicle is on the network, resolved from its route progress.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Location {
    pub route: RouteId,
    pub progress: f64,
    /// Index of the current segment within the route.
    pub route_index: usize,
    pub segment: SegmentId,
    /// Distance from the start of the current segment.
    pub offset: f64,
    pub frame: f64,
}

/// Distance from an entry position to the roundabout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EntryDistance {
    Approaching(f64),
    /// The vehicle is already past the entry segment.
    Past,
}

impl EntryDistance {
    pub fn meters(self) -> f64 {
        match self {
            EntryDistance::Approaching(d) => d,
            EntryDistance::Past => 0.0,
        }
    }
}

/// Serializable segment description used by the run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentSpec {
    pub name: String,
    pub length: f64,
    #[serde(default)]
    pub successors: Vec<String>,
    #[serde(default)]
    pub roundabout: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteSpec {
    pub north: Vec<String>,
    pub west: Vec<String>,
}

/// Geometry parameters of the default roundabout layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub west_entry_length: f64,
    pub north_entry_length: f64,
    pub ring_circumference: f64,
    /// Span of the absolute frame, equal to the west route length.
    pub frame_length: f64,
    /// Explicit segment list; replaces the default layout when present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segments: Option<Vec<SegmentSpec>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub routes: Option<RouteSpec>,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            west_entry_length: 86.6,
            north_entry_length: 74.3,
            ring_circumference: 80.0,
            frame_length: 443.0,
            segments: None,
            routes: None,
        }
    }
}

impl GeometryConfig {
    /// Segment and route lists, either explicit or derived from the lengths.
    ///
    /// The default circle is four equal arcs W→S→E→N→W. West traffic enters at
    /// W and drives the full circle; north traffic joins at N and shares the
    /// last arc and the exit.
    pub fn layout(&self) -> Result<(Vec<SegmentSpec>, RouteSpec), NetworkError> {
        if let (Some(segments), Some(routes)) = (&self.segments, &self.routes) {
            return Ok((segments.clone(), routes.clone()));
        }
        let arc = self.ring_circumference / 4.0;
        let exit = self.frame_length - self.west_entry_length - self.ring_circumference;
        if exit <= 0.0 {
            return Err(NetworkError::NonPositiveExit(exit));
        }
        let seg = |name: &str, length: f64, succ: &[&str], roundabout: bool| SegmentSpec {
            name: name.to_string(),
            length,
            successors: succ.iter().map(|s| s.to_string()).collect(),
            roundabout,
        };
        let segments = vec![
            seg("west_entry", self.west_entry_length, &["ring_ws"], false),
            seg("north_entry", self.north_entry_length, &["ring_nw"], false),
            seg("ring_ws", arc, &["ring_se"], true),
            seg("ring_se", arc, &["ring_en"], true),
            seg("ring_en", arc, &["ring_nw"], true),
            seg("ring_nw", arc, &["ring_ws", "west_exit"], true),
            seg("west_exit", exit, &[], false),
        ];
        let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let routes = RouteSpec {
            north: names(&["north_entry", "ring_nw", "west_exit"]),
            west: names(&["west_entry", "ring_ws", "ring_se", "ring_en", "ring_nw", "west_exit"]),
        };
        Ok((segments, routes))
    }

    /// Same layout with every length multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.west_entry_length *= factor;
        out.north_entry_length *= factor;
        out.ring_circumference *= factor;
        out.frame_length *= factor;
        if let Some(segments) = out.segments.as_mut() {
            for s in segments {
                s.length *= factor;
            }
        }
        out
    }
}

/// Immutable road network.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadNetwork {
    segments: Vec<Segment>,
    routes: [Route; 2],
    roundabout: BTreeSet<SegmentId>,
    entry_lengths: [f64; 2],
    frame_length: f64,
    /// Per (north index, west index) first shared segment, as route indices.
    merge: Option<(usize, usize)>,
}

impl Default for RoadNetwork {
    fn default() -> Self {
        Self::from_config(&GeometryConfig::default()).expect("default geometry is valid")
    }
}

impl RoadNetwork {
    pub fn from_config(cfg: &GeometryConfig) -> Result<Self, NetworkError> {
        let (segments, routes) = cfg.layout()?;
        Self::build(&segments, &routes)
    }

    pub fn build(specs: &[SegmentSpec], routes: &RouteSpec) -> Result<Self, NetworkError> {
        let mut ids = BTreeMap::new();
        for (i, s) in specs.iter().enumerate() {
            if ids.insert(s.name.clone(), i).is_some() {
                return Err(NetworkError::DuplicateSegment(s.name.clone()));
            }
            if !(s.length > 0.0 && s.length.is_finite()) {
                return Err(NetworkError::NonPositiveLength(s.name.clone()));
            }
        }
        let mut segments = Vec::with_capacity(specs.len());
        for (i, s) in specs.iter().enumerate() {
            let successors = s
                .successors
                .iter()
                .map(|n| {
                    ids.get(n).copied().ok_or_else(|| NetworkError::UnknownSuccessor {
                        from: s.name.clone(),
                        to: n.clone(),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            segments.push(Segment {
                id: i,
                name: s.name.clone(),
                length: s.length,
                successors,
                frame_start: f64::NAN,
            });
        }
        let roundabout: BTreeSet<SegmentId> =
            specs.iter().enumerate().filter(|(_, s)| s.roundabout).map(|(i, _)| i).collect();
        check_cycle(&segments, &roundabout)?;

        let resolve = |route: RouteId, names: &[String]| -> Result<Route, NetworkError> {
            let mut segs = Vec::with_capacity(names.len());
            for n in names {
                let id = *ids.get(n).ok_or_else(|| NetworkError::UnknownSegment {
                    route,
                    segment: n.clone(),
                })?;
                segs.push(id);
            }
            for w in segs.windows(2) {
                if !segments[w[0]].successors.contains(&w[1]) {
                    return Err(NetworkError::Discontiguous {
                        route,
                        from: segments[w[0]].name.clone(),
                        to: segments[w[1]].name.clone(),
                    });
                }
            }
            if segs.first().is_none_or(|s| roundabout.contains(s)) {
                return Err(NetworkError::EntryInsideRoundabout { route });
            }
            if !segs.iter().any(|s| roundabout.contains(s)) {
                return Err(NetworkError::MissesRoundabout { route });
            }
            let mut starts = Vec::with_capacity(segs.len());
            let mut acc = 0.0;
            for &s in &segs {
                starts.push(acc);
                acc += segments[s].length;
            }
            Ok(Route { id: route, segments: segs, starts, total_length: acc })
        };
        let north = resolve(RouteId::North, &routes.north)?;
        let west = resolve(RouteId::West, &routes.west)?;
        if north.segments.last() != west.segments.last() {
            return Err(NetworkError::NoSharedExit);
        }

        // Frame: west route is the reference, north-only segments are laid
        // out backwards from the first segment north shares with west.
        for (&s, &start) in west.segments.iter().zip(&west.starts) {
            segments[s].frame_start = start;
        }
        let first_shared = north
            .segments
            .iter()
            .position(|s| !segments[*s].frame_start.is_nan())
            .expect("routes share the exit");
        let mut cursor = segments[north.segments[first_shared]].frame_start;
        for &s in north.segments[..first_shared].iter().rev() {
            cursor -= segments[s].length;
            segments[s].frame_start = cursor;
        }
        let merge = west.position_of(north.segments[first_shared]).map(|w| (first_shared, w));

        let net = Self {
            entry_lengths: [segments[north.segments[0]].length, segments[west.segments[0]].length],
            frame_length: west.total_length,
            segments,
            routes: [north, west],
            roundabout,
            merge,
        };
        for r in RouteId::ALL {
            let route = net.route(r);
            for w in route.segments.windows(2) {
                let (a, b) = (&net.segments[w[0]], &net.segments[w[1]]);
                if (a.frame_start + a.length - b.frame_start).abs() > 1e-9 {
                    return Err(NetworkError::NonMonotoneFrame(r));
                }
            }
        }
        Ok(net)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, id: SegmentId) -> &Segment {
        &self.segments[id]
    }

    pub fn route(&self, id: RouteId) -> &Route {
        &self.routes[id.index()]
    }

    pub fn roundabout_ids(&self) -> &BTreeSet<SegmentId> {
        &self.roundabout
    }

    pub fn entry_length(&self, route: RouteId) -> f64 {
        self.entry_lengths[route.index()]
    }

    pub fn entry_segment(&self, route: RouteId) -> SegmentId {
        self.route(route).segments[0]
    }

    pub fn frame_length(&self) -> f64 {
        self.frame_length
    }

    /// Route index of the first segment shared by the two routes, for the
    /// route `of` (the merge point where north traffic joins the circle).
    pub fn merge_index(&self, of: RouteId) -> Option<usize> {
        self.merge.map(|(n, w)| match of {
            RouteId::North => n,
            RouteId::West => w,
        })
    }

    /// Frame interval `[start, end)` of the first shared segment.
    pub fn merge_arc(&self) -> Option<(f64, f64)> {
        let idx = self.merge_index(RouteId::West)?;
        let seg = &self.segments[self.route(RouteId::West).segments[idx]];
        Some((seg.frame_start, seg.frame_start + seg.length))
    }

    pub fn locate(&self, route: RouteId, progress: f64) -> Result<Location, NetworkError> {
        let r = self.route(route);
        if !(0.0..=r.total_length).contains(&progress) {
            return Err(NetworkError::ProgressOutOfRange {
                route,
                progress,
                total: r.total_length,
            });
        }
        let route_index = r.segment_index(progress);
        let segment = r.segments[route_index];
        let offset = progress - r.starts[route_index];
        Ok(Location {
            route,
            progress,
            route_index,
            segment,
            offset,
            frame: self.segments[segment].frame_start + offset,
        })
    }

    /// Absolute frame coordinate of a route position.
    pub fn position_1d(&self, route: RouteId, progress: f64) -> Result<f64, NetworkError> {
        self.locate(route, progress).map(|l| l.frame)
    }

    pub fn distance_to_roundabout(
        &self,
        route: RouteId,
        progress: f64,
    ) -> Result<EntryDistance, NetworkError> {
        let loc = self.locate(route, progress)?;
        if loc.route_index == 0 {
            Ok(EntryDistance::Approaching(self.entry_length(route) - progress))
        } else {
            Ok(EntryDistance::Past)
        }
    }

    pub fn on_roundabout(&self, route: RouteId, progress: f64) -> Result<bool, NetworkError> {
        self.locate(route, progress).map(|l| self.roundabout.contains(&l.segment))
    }
}

fn check_cycle(segments: &[Segment], ring: &BTreeSet<SegmentId>) -> Result<(), NetworkError> {
    let start = *ring.iter().next().ok_or(NetworkError::NotACycle)?;
    let mut seen = BTreeSet::new();
    let mut cur = start;
    loop {
        if !seen.insert(cur) {
            return Err(NetworkError::NotACycle);
        }
        let next: Vec<_> = segments[cur].successors.iter().filter(|s| ring.contains(s)).collect();
        if next.len() != 1 {
            return Err(NetworkError::NotACycle);
        }
        cur = *next[0];
        if cur == start {
            break;
        }
    }
    if seen.len() == ring.len() {
        Ok(())
    } else {
        Err(NetworkError::NotACycle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_segment_lengths_sum_to_frame() {
        let net = RoadNetwork::default();
        let west = net.route(RouteId::West);
        let sum: f64 = west.segments.iter().map(|&s| net.segment(s).length).sum();
        assert!((sum - 443.0).abs() < 1e-9);
        assert!((west.total_length - 443.0).abs() < 1e-9);
        assert!((net.position_1d(RouteId::West, west.total_length).unwrap() - 443.0).abs() < 1e-9);
        assert_eq!(net.position_1d(RouteId::West, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn entry_distances() {
        let net = RoadNetwork::default();
        let d = net.distance_to_roundabout(RouteId::North, 0.0).unwrap();
        assert!((d.meters() - 74.3).abs() < 1e-12);
        let d = net.distance_to_roundabout(RouteId::North, 30.0).unwrap();
        assert!((d.meters() - 44.3).abs() < 1e-12);
        // the entry point itself belongs to the first roundabout segment
        let d = net.distance_to_roundabout(RouteId::North, 74.3).unwrap();
        assert_eq!(d, EntryDistance::Past);
        assert_eq!(d.meters(), 0.0);
        let d = net.distance_to_roundabout(RouteId::West, 86.6 - 1e-9).unwrap();
        assert!(d.meters() < 1e-6);
    }

    #[test]
    fn roundabout_membership() {
        let net = RoadNetwork::default();
        assert!(!net.on_roundabout(RouteId::West, 10.0).unwrap());
        assert!(net.on_roundabout(RouteId::West, 86.6).unwrap());
        assert!(net.on_roundabout(RouteId::North, 75.0).unwrap());
        assert!(!net.on_roundabout(RouteId::West, 200.0).unwrap());
        assert_eq!(net.roundabout_ids().len(), 4);
    }

    #[test]
    fn out_of_range_progress_is_an_error() {
        let net = RoadNetwork::default();
        assert!(matches!(
            net.position_1d(RouteId::North, -0.1),
            Err(NetworkError::ProgressOutOfRange { .. })
        ));
        let total = net.route(RouteId::North).total_length;
        assert!(net.position_1d(RouteId::North, total + 0.1).is_err());
    }

    #[test]
    fn shared_segments_agree() {
        let net = RoadNetwork::default();
        // north joins on ring_nw, which starts at 86.6 + 60 on the west route
        let n = net.position_1d(RouteId::North, 74.3 + 3.0).unwrap();
        let w = net.position_1d(RouteId::West, 146.6 + 3.0).unwrap();
        assert!((n - w).abs() < 1e-12);
        assert_eq!(net.merge_index(RouteId::North), Some(1));
        assert_eq!(net.merge_index(RouteId::West), Some(4));
        let (a, b) = net.merge_arc().unwrap();
        assert!((a - 146.6).abs() < 1e-9 && (b - 166.6).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_geometry() {
        let mut cfg = GeometryConfig::default();
        cfg.frame_length = 100.0;
        assert!(matches!(RoadNetwork::from_config(&cfg), Err(NetworkError::NonPositiveExit(_))));

        let (mut segs, routes) = GeometryConfig::default().layout().unwrap();
        segs[3].successors = vec!["ring_nw".into()];
        assert_eq!(RoadNetwork::build(&segs, &routes), Err(NetworkError::NotACycle));

        let (segs, mut routes) = GeometryConfig::default().layout().unwrap();
        routes.west.remove(2);
        assert!(matches!(
            RoadNetwork::build(&segs, &routes),
            Err(NetworkError::Discontiguous { .. })
        ));
    }

    proptest! {
        #[test]
        fn frame_is_strictly_increasing(route in prop::sample::select(vec![RouteId::North, RouteId::West]),
                                        a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let net = RoadNetwork::default();
            let total = net.route(route).total_length;
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assume!(hi - lo > 1e-9);
            let x = net.position_1d(route, lo * total).unwrap();
            let y = net.position_1d(route, hi * total).unwrap();
            prop_assert!(y > x);
            // unit slope: the frame is a translation of progress on every segment chain
            prop_assert!(((y - x) - (hi - lo) * total).abs() < 1e-9);
        }

        #[test]
        fn entry_distance_plus_progress_is_entry_length(route in prop::sample::select(vec![RouteId::North, RouteId::West]),
                                                        f in 0.0f64..1.0) {
            let net = RoadNetwork::default();
            let len = net.entry_length(route);
            let p = f * len;
            let d = net.distance_to_roundabout(route, p).unwrap().meters();
            prop_assert!((d + p - len).abs() < 1e-9);
        }

        #[test]
        fn scaled_geometry_stays_consistent(factor in 0.9f64..1.1) {
            let net = RoadNetwork::from_config(&GeometryConfig::default().scaled(factor)).unwrap();
            prop_assert!((net.frame_length() - 443.0 * factor).abs() < 1e-9);
        }
    }
}

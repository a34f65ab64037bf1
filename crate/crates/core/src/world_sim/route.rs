use serde::{Deserialize, Serialize};

use super::geometry::{project_on_segment, Vec2};
use super::SimError;

/// Progress never reported as complete unless the goal is actually reached.
const SHORT_OF_GOAL: f64 = 99.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteSpec {
    pub waypoints: Vec<Vec2>,
    #[serde(default = "default_goal_tolerance")]
    pub goal_tolerance: f64,
}

fn default_goal_tolerance() -> f64 {
    2.0
}

impl RouteSpec {
    pub fn new(waypoints: Vec<Vec2>, goal_tolerance: f64) -> Result<Self, SimError> {
        let r = RouteSpec {
            waypoints,
            goal_tolerance,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.waypoints.len() < 2 {
            return Err(SimError::InvalidRoute("needs at least two waypoints"));
        }
        if self.waypoints.iter().any(|w| !w.is_finite()) {
            return Err(SimError::InvalidRoute("non-finite waypoint"));
        }
        if self.waypoints.windows(2).any(|w| w[0] == w[1]) {
            return Err(SimError::InvalidRoute("consecutive waypoints must differ"));
        }
        if !(self.goal_tolerance > 0.0) {
            return Err(SimError::InvalidRoute("goal_tolerance must be > 0"));
        }
        Ok(())
    }

    pub fn segment_count(&self) -> usize {
        self.waypoints.len() - 1
    }

    pub fn length(&self) -> f64 {
        self.waypoints.windows(2).map(|w| w[0].distance(w[1])).sum()
    }

    pub fn goal(&self) -> Vec2 {
        *self.waypoints.last().expect("validated route")
    }

    /// Arc length at the start of each segment.
    fn cumulative(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(self.waypoints.len());
        out.push(0.0);
        for w in self.waypoints.windows(2) {
            acc += w[0].distance(w[1]);
            out.push(acc);
        }
        out
    }

    /// Point at arc length `s`, clamped to the route.
    pub fn point_at(&self, s: f64) -> Vec2 {
        let cum = self.cumulative();
        let s = s.clamp(0.0, *cum.last().unwrap());
        for i in 0..self.segment_count() {
            if s <= cum[i + 1] || i + 1 == self.segment_count() {
                let a = self.waypoints[i];
                let b = self.waypoints[i + 1];
                let seg = cum[i + 1] - cum[i];
                let t = if seg > 0.0 { (s - cum[i]) / seg } else { 0.0 };
                return a + (b - a) * t;
            }
        }
        self.goal()
    }

    /// Nearest projection restricted to segments `from..=to`: (segment, arc length, distance).
    fn project(&self, p: Vec2, from: usize, to: usize) -> (usize, f64, f64) {
        let cum = self.cumulative();
        let mut best = (from, 0.0, f64::INFINITY);
        for i in from..=to.min(self.segment_count() - 1) {
            let a = self.waypoints[i];
            let b = self.waypoints[i + 1];
            let (t, d) = project_on_segment(p, a, b);
            if d < best.2 {
                best = (i, cum[i] + t * (cum[i + 1] - cum[i]), d);
            }
        }
        best
    }

    fn percent(&self, p: Vec2, segment: usize, s: f64) -> f64 {
        let total = self.length();
        let at_goal = segment + 1 == self.segment_count()
            && p.distance(self.goal()) <= self.goal_tolerance;
        if at_goal {
            100.0
        } else {
            (100.0 * s / total).clamp(0.0, SHORT_OF_GOAL)
        }
    }
}

/// Percentage of `route` covered by a vehicle at `position`, from its
/// nearest projection over the whole route. Stateless; episodes use
/// [`RouteTracker`] to keep progress monotone.
pub fn route_progress(position: Vec2, route: &RouteSpec) -> f64 {
    let (seg, s, _) = route.project(position, 0, route.segment_count() - 1);
    route.percent(position, seg, s)
}

/// Monotone route progress for one vehicle over an episode.
///
/// Projection is searched in a small window ahead of the last matched
/// segment so a route that doubles back cannot jump forward.
#[derive(Debug, Clone)]
pub struct RouteTracker {
    route: RouteSpec,
    segment: usize,
    best: f64,
    arc: f64,
}

impl RouteTracker {
    const WINDOW: usize = 2;

    pub fn new(route: RouteSpec) -> Self {
        RouteTracker {
            route,
            segment: 0,
            best: 0.0,
            arc: 0.0,
        }
    }

    pub fn route(&self) -> &RouteSpec {
        &self.route
    }

    pub fn update(&mut self, position: Vec2) -> f64 {
        let (seg, s, _) = self
            .route
            .project(position, self.segment, self.segment + Self::WINDOW);
        if s >= self.arc {
            self.arc = s;
            self.segment = seg;
        }
        let pct = self.route.percent(position, self.segment, self.arc);
        if pct > self.best {
            self.best = pct;
        }
        self.best
    }

    pub fn progress(&self) -> f64 {
        self.best
    }

    /// Arc length covered so far, meters.
    pub fn arc_length(&self) -> f64 {
        self.arc
    }

    pub fn is_complete(&self) -> bool {
        self.best >= 100.0
    }
}

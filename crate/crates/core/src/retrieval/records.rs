//! Geo-tagged image records and ground-truth matching rules.

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::registry::Registry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Database,
    Query,
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaceRecord {
    pub id: u64,
    /// Path of the image tensor, relative to the manifest.
    pub tensor: String,
    pub easting: f64,
    pub northing: f64,
    #[serde(default)]
    pub heading: Option<f64>,
    #[serde(default)]
    pub frame_index: Option<i64>,
    pub place_id: u64,
    pub split: Split,
}

impl PlaceRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.easting.is_finite() && self.northing.is_finite()) {
            return Err(Error::Data(format!("record {}: non-finite coordinates", self.id)));
        }
        if let Some(h) = self.heading {
            if !(0.0..360.0).contains(&h) {
                return Err(Error::Data(format!("record {}: heading {h} outside [0, 360)", self.id)));
            }
        }
        Ok(())
    }

    pub fn distance_m(&self, other: &PlaceRecord) -> f64 {
        (self.easting - other.easting).hypot(self.northing - other.northing)
    }
}

/// Smallest absolute difference between two headings, in degrees.
pub fn heading_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroundTruthConfig {
    /// `geo`, `frame` or `unique`.
    pub mode: String,
    pub dist_m: f64,
    pub heading_deg: Option<f64>,
    pub frame_window: u64,
}

impl Default for GroundTruthConfig {
    fn default() -> Self {
        Self {
            mode: "geo".into(),
            dist_m: 25.0,
            heading_deg: None,
            frame_window: 10,
        }
    }
}

/// Decides whether a database record is a correct answer for a query.
pub trait GroundTruth {
    fn name(&self) -> &'static str;
    fn is_match(&self, query: &PlaceRecord, db: &PlaceRecord) -> bool;
}

/// Within a radius, and optionally within a heading tolerance.
pub struct GeoMatch {
    pub dist_m: f64,
    pub heading_deg: Option<f64>,
}

impl GroundTruth for GeoMatch {
    fn name(&self) -> &'static str {
        "geo"
    }

    fn is_match(&self, q: &PlaceRecord, d: &PlaceRecord) -> bool {
        if q.distance_m(d) > self.dist_m {
            return false;
        }
        match (self.heading_deg, q.heading, d.heading) {
            (Some(tol), Some(a), Some(b)) => heading_diff(a, b) <= tol,
            (Some(_), _, _) => false,
            (None, _, _) => true,
        }
    }
}

/// Sequence datasets: frame indices at most `window` apart.
pub struct FrameMatch {
    pub window: u64,
}

impl GroundTruth for FrameMatch {
    fn name(&self) -> &'static str {
        "frame"
    }

    fn is_match(&self, q: &PlaceRecord, d: &PlaceRecord) -> bool {
        match (q.frame_index, d.frame_index) {
            (Some(a), Some(b)) => a.abs_diff(b) <= self.window,
            _ => false,
        }
    }
}

/// One-to-one datasets: only the record sharing the query's place id.
pub struct UniqueMatch;

impl GroundTruth for UniqueMatch {
    fn name(&self) -> &'static str {
        "unique"
    }

    fn is_match(&self, q: &PlaceRecord, d: &PlaceRecord) -> bool {
        q.place_id == d.place_id
    }
}

pub fn ground_truths() -> Registry<dyn GroundTruth, GroundTruthConfig> {
    let mut r: Registry<dyn GroundTruth, GroundTruthConfig> = Registry::new("ground-truth mode");
    r.register("geo", |c| {
        if !(c.dist_m > 0.0) {
            return Err(config(format!("distance threshold {} must be positive", c.dist_m)));
        }
        Ok(Box::new(GeoMatch {
            dist_m: c.dist_m,
            heading_deg: c.heading_deg,
        }) as Box<dyn GroundTruth>)
    });
    r.register("frame", |c| {
        Ok(Box::new(FrameMatch { window: c.frame_window }) as Box<dyn GroundTruth>)
    });
    r.register("unique", |_| Ok(Box::new(UniqueMatch) as Box<dyn GroundTruth>));
    r
}

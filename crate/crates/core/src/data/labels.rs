//! xBD label files: JSON features carrying WKT polygons and a damage subtype.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Damage level of a building footprint (mask values 1..=4).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DamageClass {
    Undamaged = 1,
    Minor = 2,
    Major = 3,
    Destroyed = 4,
}

impl DamageClass {
    pub const ALL: [DamageClass; 4] = [Self::Undamaged, Self::Minor, Self::Major, Self::Destroyed];

    pub fn value(self) -> u8 {
        self as u8
    }

    pub fn from_value(v: u8) -> Option<Self> {
        match v {
            1 => Some(Self::Undamaged),
            2 => Some(Self::Minor),
            3 => Some(Self::Major),
            4 => Some(Self::Destroyed),
            _ => None,
        }
    }

    pub fn subtype(self) -> &'static str {
        match self {
            Self::Undamaged => "no-damage",
            Self::Minor => "minor-damage",
            Self::Major => "major-damage",
            Self::Destroyed => "destroyed",
        }
    }
}

/// Handling of the `un-classified` subtype.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Unclassified {
    /// Count it as an undamaged building.
    #[default]
    Undamaged,
    /// Drop the feature, leaving its pixels as background.
    Ignore,
}

pub type Point = (f64, f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolygonAnnotation {
    /// Outer boundary in pixel coordinates `(x, y)`, without the closing vertex.
    pub ring: Vec<Point>,
    /// Inner boundaries; pixels inside a hole are not covered.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub holes: Vec<Vec<Point>>,
    pub damage_class: DamageClass,
    pub uid: String,
}

impl PolygonAnnotation {
    pub fn new(ring: Vec<Point>, damage_class: DamageClass, uid: impl Into<String>) -> Result<Self> {
        let ring = normalize_ring(ring)?;
        Ok(Self {
            ring,
            holes: Vec::new(),
            damage_class,
            uid: uid.into(),
        })
    }

    /// Every ring of the polygon, outer first.
    pub fn rings(&self) -> impl Iterator<Item = &[Point]> {
        std::iter::once(self.ring.as_slice()).chain(self.holes.iter().map(|h| h.as_slice()))
    }

    /// WKT text of the polygon, closing each ring.
    pub fn to_wkt(&self) -> String {
        let ring = |r: &[Point]| {
            let mut pts: Vec<String> = r.iter().map(|(x, y)| format!("{x} {y}")).collect();
            pts.push(format!("{} {}", r[0].0, r[0].1));
            format!("({})", pts.join(", "))
        };
        let rings: Vec<String> = self.rings().map(ring).collect();
        format!("POLYGON ({})", rings.join(", "))
    }
}

/// Drops a repeated closing vertex and checks for three distinct vertices.
fn normalize_ring(mut ring: Vec<Point>) -> Result<Vec<Point>> {
    if ring.len() > 1 && ring.first() == ring.last() {
        ring.pop();
    }
    let mut distinct: Vec<Point> = Vec::new();
    for p in &ring {
        if !p.0.is_finite() || !p.1.is_finite() {
            return Err(Error::Wkt("non-finite coordinate".into()));
        }
        if !distinct.contains(p) {
            distinct.push(*p);
        }
    }
    if distinct.len() < 3 {
        return Err(Error::Label(format!(
            "ring has {} distinct vertices, need at least 3",
            distinct.len()
        )));
    }
    Ok(ring)
}

/// Parses the polygons of a WKT `POLYGON` or `MULTIPOLYGON`.
pub fn parse_wkt(text: &str) -> Result<Vec<Vec<Vec<Point>>>> {
    let mut p = WktParser { s: text.as_bytes(), pos: 0 };
    let tag = p.word();
    let polygons = match tag.to_ascii_uppercase().as_str() {
        "POLYGON" => vec![p.polygon()?],
        "MULTIPOLYGON" => {
            p.expect(b'(')?;
            let mut polys = vec![p.polygon()?];
            while p.eat(b',') {
                polys.push(p.polygon()?);
            }
            p.expect(b')')?;
            polys
        }
        "" => return Err(Error::Wkt("missing geometry type".into())),
        other => return Err(Error::Wkt(format!("unsupported geometry `{other}`"))),
    };
    p.skip_ws();
    if p.pos != p.s.len() {
        return Err(Error::Wkt(format!("trailing input at byte {}", p.pos)));
    }
    Ok(polygons)
}

struct WktParser<'a> {
    s: &'a [u8],
    pos: usize,
}

impl WktParser<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn word(&mut self) -> String {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_alphabetic() {
            self.pos += 1;
        }
        String::from_utf8_lossy(&self.s[start..self.pos]).into_owned()
    }

    fn eat(&mut self, c: u8) -> bool {
        self.skip_ws();
        if self.s.get(self.pos) == Some(&c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(Error::Wkt(format!("expected `{}` at byte {}", c as char, self.pos)))
        }
    }

    fn number(&mut self) -> Result<f64> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.s.len() && matches!(self.s[self.pos], b'0'..=b'9' | b'.' | b'-' | b'+' | b'e' | b'E') {
            self.pos += 1;
        }
        let tok = std::str::from_utf8(&self.s[start..self.pos]).unwrap_or("");
        tok.parse::<f64>()
            .map_err(|_| Error::Wkt(format!("bad number `{tok}` at byte {start}")))
    }

    fn ring(&mut self) -> Result<Vec<Point>> {
        self.expect(b'(')?;
        let mut pts = Vec::new();
        loop {
            let x = self.number()?;
            let y = self.number()?;
            pts.push((x, y));
            // Extra ordinates (Z/M) are ignored.
            while !matches!(self.peek(), Some(b',') | Some(b')') | None) {
                self.number()?;
            }
            if !self.eat(b',') {
                break;
            }
        }
        self.expect(b')')?;
        Ok(pts)
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.s.get(self.pos).copied()
    }

    fn polygon(&mut self) -> Result<Vec<Vec<Point>>> {
        self.expect(b'(')?;
        let mut rings = vec![self.ring()?];
        while self.eat(b',') {
            rings.push(self.ring()?);
        }
        self.expect(b')')?;
        Ok(rings)
    }
}

fn subtype_class(subtype: Option<&str>, unclassified: Unclassified) -> Result<Option<DamageClass>> {
    Ok(Some(match subtype {
        // Pre-event label files carry no subtype: every footprint is intact.
        None => DamageClass::Undamaged,
        Some("no-damage") => DamageClass::Undamaged,
        Some("minor-damage") => DamageClass::Minor,
        Some("major-damage") => DamageClass::Major,
        Some("destroyed") => DamageClass::Destroyed,
        Some("un-classified") => match unclassified {
            Unclassified::Undamaged => DamageClass::Undamaged,
            Unclassified::Ignore => return Ok(None),
        },
        Some(other) => return Err(Error::Label(format!("unknown damage subtype `{other}`"))),
    }))
}

/// Parses an xBD label file into pixel-space building annotations.
///
/// `features` may be a plain list or the xBD object whose `xy` list holds
/// pixel coordinates. Non-building features are skipped.
pub fn parse_labels(json_text: &str, unclassified: Unclassified) -> Result<Vec<PolygonAnnotation>> {
    let root: Value = serde_json::from_str(json_text)?;
    let features = match root.get("features") {
        Some(Value::Array(list)) => list,
        Some(Value::Object(obj)) => match obj.get("xy") {
            Some(Value::Array(list)) => list,
            Some(_) => return Err(Error::Label("`features.xy` is not a list".into())),
            None => return Ok(Vec::new()),
        },
        Some(_) => return Err(Error::Label("`features` is neither a list nor an object".into())),
        None => return Err(Error::Label("missing `features`".into())),
    };
    let mut out = Vec::new();
    for (i, feature) in features.iter().enumerate() {
        let props = feature.get("properties");
        let prop = |key: &str| props.and_then(|p| p.get(key)).and_then(Value::as_str);
        if let Some(kind) = prop("feature_type") {
            if kind != "building" {
                continue;
            }
        }
        let wkt = feature
            .get("wkt")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Label(format!("feature {i} has no `wkt` string")))?;
        let Some(class) = subtype_class(prop("subtype"), unclassified)? else {
            continue;
        };
        let uid = prop("uid").map_or_else(|| format!("feature-{i}"), str::to_string);
        for rings in parse_wkt(wkt)? {
            let mut rings = rings.into_iter();
            let outer = rings.next().ok_or_else(|| Error::Wkt("polygon without rings".into()))?;
            let mut ann = PolygonAnnotation::new(outer, class, uid.clone())?;
            ann.holes = rings.map(normalize_ring).collect::<Result<_>>()?;
            out.push(ann);
        }
    }
    Ok(out)
}

/// Serializes annotations in the xBD layout (`features.xy`).
pub fn write_labels(annotations: &[PolygonAnnotation]) -> String {
    let xy: Vec<Value> = annotations
        .iter()
        .map(|a| {
            serde_json::json!({
                "properties": {
                    "feature_type": "building",
                    "subtype": a.damage_class.subtype(),
                    "uid": a.uid,
                },
                "wkt": a.to_wkt(),
            })
        })
        .collect();
    serde_json::json!({ "features": { "lng_lat": [], "xy": xy }, "metadata": {} }).to_string()
}

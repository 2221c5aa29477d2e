//! Polygon to mask rasterization by even-odd scanline crossing at pixel centers.

use super::labels::{Point, PolygonAnnotation};

/// X coordinates where the horizontal line `y = py` crosses the polygon's
/// edges. An edge counts when exactly one endpoint lies strictly above `py`.
pub fn scanline_crossings<'a>(rings: impl Iterator<Item = &'a [Point]>, py: f64, out: &mut Vec<f64>) {
    out.clear();
    for ring in rings {
        let n = ring.len();
        for i in 0..n {
            let a = ring[i];
            let b = ring[(i + 1) % n];
            if (a.1 > py) != (b.1 > py) {
                out.push(a.0 + (py - a.1) * (b.0 - a.0) / (b.1 - a.1));
            }
        }
    }
}

fn is_degenerate(ann: &PolygonAnnotation) -> bool {
    let r = &ann.ring;
    let twice_area: f64 = (0..r.len())
        .map(|i| {
            let (a, b) = (r[i], r[(i + 1) % r.len()]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum();
    r.len() < 3 || twice_area == 0.0 || !twice_area.is_finite()
}

/// Burns the annotations into an `h x w` row-major mask.
///
/// Pixel `(r, c)` takes the class of a polygon containing its center
/// `(c + 0.5, r + 0.5)`; a center is inside when the number of crossings
/// strictly to its right is odd. Overlaps keep the highest class.
pub fn rasterize(annotations: &[PolygonAnnotation], h: usize, w: usize) -> Vec<u8> {
    let mut mask = vec![0u8; h * w];
    let mut xs = Vec::new();
    for ann in annotations {
        if is_degenerate(ann) {
            log::warn!("skipping degenerate polygon `{}`", ann.uid);
            continue;
        }
        let class = ann.damage_class.value();
        let (ymin, ymax) = ann
            .rings()
            .flatten()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
        let r0 = ((ymin - 0.5).floor().max(0.0)) as usize;
        let r1 = ((ymax + 0.5).ceil().max(0.0) as usize).min(h);
        for r in r0..r1 {
            let py = r as f64 + 0.5;
            scanline_crossings(ann.rings(), py, &mut xs);
            xs.sort_by(f64::total_cmp);
            // Centers in [xs[2k], xs[2k+1]) have an odd count of crossings to the right.
            for span in xs.chunks_exact(2) {
                let (c0, c1) = (first_center_at_or_after(span[0]), first_center_at_or_after(span[1]));
                let (c0, c1) = (c0.min(w), c1.min(w));
                for px in &mut mask[r * w + c0..r * w + c1.max(c0)] {
                    *px = (*px).max(class);
                }
            }
        }
    }
    mask
}

/// Smallest column `c >= 0` whose center `c + 0.5` is not left of `x`.
fn first_center_at_or_after(x: f64) -> usize {
    if x.is_nan() || x <= 0.5 {
        return 0;
    }
    if x > usize::MAX as f64 / 2.0 {
        return usize::MAX / 2;
    }
    let mut c = (x - 0.5).ceil() as usize;
    while c > 0 && (c - 1) as f64 + 0.5 >= x {
        c -= 1;
    }
    while (c as f64 + 0.5) < x {
        c += 1;
    }
    c
}

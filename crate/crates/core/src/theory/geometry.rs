//! Exact planar geometry of the basic cell: vertex ordering, area, second
//! moment and polygon clipping. Only `L ≤ 2` has closed forms here.

use crate::lattice::GeneratorMatrix;

/// Vertices of the basic cell in counter-clockwise order (`L = 2`), or the two
/// endpoints of the interval (`L = 1`).
pub fn cell_polygon(gen: &GeneratorMatrix) -> Option<Vec<[f64; 2]>> {
    match gen.dim() {
        1 => {
            let h = 0.5 * gen.entries()[0].abs();
            Some(vec![[-h, 0.0], [h, 0.0]])
        }
        2 => {
            let mut vs: Vec<[f64; 2]> = gen.voronoi_vertices()?.into_iter().map(|v| [v[0], v[1]]).collect();
            vs.sort_by(|a, b| a[1].atan2(a[0]).total_cmp(&b[1].atan2(b[0])));
            Some(vs)
        }
        _ => None,
    }
}

/// Signed shoelace area.
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - a[1] * b[0]
        })
        .sum::<f64>()
        * 0.5
}

/// `∫‖x‖² dx` over a convex polygon containing the origin, by a fan of
/// triangles `(0, a, b)`, each contributing `area/6 · (‖a‖² + ‖b‖² + a·b)`.
fn polygon_inertia(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            let area = 0.5 * (a[0] * b[1] - a[1] * b[0]);
            area / 6.0 * (a[0] * a[0] + a[1] * a[1] + b[0] * b[0] + b[1] * b[1] + a[0] * b[0] + a[1] * b[1])
        })
        .sum()
}

/// Exact per-dimension second moment `E‖e‖²/L` of a uniform vector on the
/// basic cell, for `L ≤ 2`.
pub fn exact_second_moment(gen: &GeneratorMatrix) -> Option<f64> {
    match gen.dim() {
        1 => {
            let g = gen.entries()[0];
            Some(g * g / 12.0)
        }
        2 => {
            let poly = cell_polygon(gen)?;
            Some(polygon_inertia(&poly) / polygon_area(&poly) / 2.0)
        }
        _ => None,
    }
}

/// Sutherland–Hodgman clip of a convex polygon to an axis-aligned box.
pub fn clip_to_box(poly: &[[f64; 2]], lo: [f64; 2], hi: [f64; 2]) -> Vec<[f64; 2]> {
    let mut out = poly.to_vec();
    // (axis, bound, keep side: +1 keeps x ≥ bound, −1 keeps x ≤ bound)
    for (axis, bound, side) in [(0, lo[0], 1.0), (0, hi[0], -1.0), (1, lo[1], 1.0), (1, hi[1], -1.0)] {
        if out.is_empty() {
            break;
        }
        let input = std::mem::take(&mut out);
        let inside = |p: &[f64; 2]| side * (p[axis] - bound) >= 0.0;
        let cross = |p: &[f64; 2], q: &[f64; 2]| {
            let t = (bound - p[axis]) / (q[axis] - p[axis]);
            [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
        };
        for i in 0..input.len() {
            let cur = &input[i];
            let prev = &input[(i + input.len() - 1) % input.len()];
            match (inside(prev), inside(cur)) {
                (true, true) => out.push(*cur),
                (true, false) => out.push(cross(prev, cur)),
                (false, true) => {
                    out.push(cross(prev, cur));
                    out.push(*cur);
                }
                (false, false) => {}
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::shapes;

    #[test]
    fn square_cell_moment_is_one_twelfth() {
        let m = exact_second_moment(&GeneratorMatrix::identity(2)).unwrap();
        assert!((m - 1.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn hexagonal_cell_moment_matches_closed_form() {
        let g = shapes::hexagonal().unit_determinant().unwrap();
        let m = exact_second_moment(&g).unwrap();
        assert!((m - 5.0 / (36.0 * 3f64.sqrt())).abs() < 1e-14, "{m}");
    }

    #[test]
    fn cell_area_equals_determinant() {
        for g in [shapes::hexagonal(), shapes::a2(), shapes::d2(), shapes::square()] {
            let poly = cell_polygon(&g).unwrap();
            assert!((polygon_area(&poly) - g.determinant().abs()).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_partitions_the_cell() {
        let poly = cell_polygon(&shapes::hexagonal()).unwrap();
        let mut total = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                let lo = [-1.0 + 0.5 * i as f64, -1.0 + 0.5 * j as f64];
                total += polygon_area(&clip_to_box(&poly, lo, [lo[0] + 0.5, lo[1] + 0.5]));
            }
        }
        assert!((total - polygon_area(&poly)).abs() < 1e-12);
    }
}

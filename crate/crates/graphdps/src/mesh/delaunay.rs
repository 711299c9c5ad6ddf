//! Bowyer-Watson Delaunay triangulation in the plane.
//!
//! Plain f64 predicates are adequate here: input points live in the unit
//! disk and callers break exact cocircularity (see the boundary-ring jitter
//! in the disk generator).

/// Signed twice-area of triangle (a, b, c); positive when counterclockwise.
pub fn orient2d(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// In-circumcircle predicate for a CCW triangle (a, b, c): positive when d
/// lies strictly inside the circumcircle.
fn incircle(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> f64 {
    let adx = a[0] - d[0];
    let ady = a[1] - d[1];
    let bdx = b[0] - d[0];
    let bdy = b[1] - d[1];
    let cdx = c[0] - d[0];
    let cdy = c[1] - d[1];
    let ad = adx * adx + ady * ady;
    let bd = bdx * bdx + bdy * bdy;
    let cd = cdx * cdx + cdy * cdy;
    adx * (bdy * cd - bd * cdy) - ady * (bdx * cd - bd * cdx) + ad * (bdx * cdy - bdy * cdx)
}

/// Triangulate a point set. Returns CCW-oriented triangles as vertex-index
/// triples. Fails when fewer than 3 points are given or all points are
/// collinear.
pub fn triangulate(points: &[[f64; 2]]) -> Result<Vec<[usize; 3]>, String> {
    let n = points.len();
    if n < 3 {
        return Err(format!("need at least 3 points, got {n}"));
    }

    // Super-triangle generously containing the input.
    let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
    let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        min_x = min_x.min(p[0]);
        min_y = min_y.min(p[1]);
        max_x = max_x.max(p[0]);
        max_y = max_y.max(p[1]);
    }
    let span = (max_x - min_x).max(max_y - min_y).max(1.0);
    let cx = 0.5 * (min_x + max_x);
    let cy = 0.5 * (min_y + max_y);
    let big = 64.0 * span;
    let super_pts = [
        [cx - big, cy - 0.5 * big],
        [cx + big, cy - 0.5 * big],
        [cx, cy + big],
    ];

    let coord = |i: usize| -> [f64; 2] {
        if i < n {
            points[i]
        } else {
            super_pts[i - n]
        }
    };

    let mut triangles: Vec<[usize; 3]> = vec![[n, n + 1, n + 2]];

    for p_idx in 0..n {
        let p = points[p_idx];

        // Triangles whose circumcircle contains the new point.
        let mut bad: Vec<usize> = Vec::new();
        for (ti, tri) in triangles.iter().enumerate() {
            let (a, b, c) = (coord(tri[0]), coord(tri[1]), coord(tri[2]));
            if incircle(a, b, c, p) > 0.0 {
                bad.push(ti);
            }
        }
        if bad.is_empty() {
            return Err(format!(
                "point {p_idx} fell outside every circumcircle (degenerate input)"
            ));
        }

        // Cavity boundary: edges of bad triangles not shared by two of them.
        let mut boundary: Vec<(usize, usize)> = Vec::new();
        for &ti in &bad {
            let t = triangles[ti];
            for k in 0..3 {
                let e = (t[k], t[(k + 1) % 3]);
                let shared = bad.iter().any(|&tj| {
                    if tj == ti {
                        return false;
                    }
                    let u = triangles[tj];
                    u.contains(&e.0) && u.contains(&e.1)
                });
                if !shared {
                    boundary.push(e);
                }
            }
        }

        let mut keep = vec![true; triangles.len()];
        for &ti in &bad {
            keep[ti] = false;
        }
        let mut next: Vec<[usize; 3]> = triangles
            .into_iter()
            .zip(keep)
            .filter_map(|(t, k)| k.then_some(t))
            .collect();
        for (ea, eb) in boundary {
            // Cavity edges are CCW around the cavity, so (ea, eb, p) is CCW.
            next.push([ea, eb, p_idx]);
        }
        triangles = next;
    }

    // Drop triangles that touch the super-triangle and enforce CCW.
    let mut out: Vec<[usize; 3]> = Vec::new();
    for t in triangles {
        if t.iter().any(|&v| v >= n) {
            continue;
        }
        let mut t = t;
        if orient2d(points[t[0]], points[t[1]], points[t[2]]) < 0.0 {
            t.swap(1, 2);
        }
        out.push(t);
    }
    if out.is_empty() {
        return Err("triangulation produced no interior triangles".to_string());
    }
    out.sort_unstable();
    Ok(out)
}

/// Circumcenter of triangle (a, b, c); None when nearly collinear.
pub fn circumcenter(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> Option<[f64; 2]> {
    let d = 2.0 * (a[0] * (b[1] - c[1]) + b[0] * (c[1] - a[1]) + c[0] * (a[1] - b[1]));
    if d.abs() < 1e-14 {
        return None;
    }
    let a2 = a[0] * a[0] + a[1] * a[1];
    let b2 = b[0] * b[0] + b[1] * b[1];
    let c2 = c[0] * c[0] + c[1] * c[1];
    let ux = (a2 * (b[1] - c[1]) + b2 * (c[1] - a[1]) + c2 * (a[1] - b[1])) / d;
    let uy = (a2 * (c[0] - b[0]) + b2 * (a[0] - c[0]) + c2 * (b[0] - a[0])) / d;
    Some([ux, uy])
}

//! Random conductivity phantoms rasterized onto mesh nodes.
//!
//! Shape families mirror the four synthetic dataset styles: circles,
//! triangles, Fourier-boundary blobs, and horseshoe (annulus-sector)
//! inclusions, each on a unit background.

use crate::error::{GraphDpsError, Result};
use crate::mesh::TriMesh;
use crate::seeds;
use crate::NodeField;
use rand::Rng;

/// Margin kept between any inclusion and the unit circle.
pub const CONTAINMENT_MARGIN: f64 = 0.05;

/// Inclusion geometry. All shapes know how to answer point membership.
#[derive(Debug, Clone, PartialEq)]
pub enum InclusionShape {
    Circle {
        radius: f64,
    },
    /// Equilateral triangle of the given circumradius, rotated by `angle`.
    Triangle {
        circumradius: f64,
        angle: f64,
    },
    /// Star-shaped blob with boundary r(theta) = r0 (1 + sum_k a_k cos(k theta + phi_k)).
    Blob {
        r0: f64,
        amplitudes: Vec<f64>,
        phases: Vec<f64>,
    },
    /// Annulus sector: inner/outer radii with an angular gap of `opening`
    /// centered at `gap_angle`.
    Horseshoe {
        r_inner: f64,
        r_outer: f64,
        gap_angle: f64,
        opening: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inclusion {
    pub shape: InclusionShape,
    pub center: [f64; 2],
    pub conductivity: f64,
}

impl Inclusion {
    /// Maximum distance from the center to any point of the inclusion.
    pub fn extent(&self) -> f64 {
        match &self.shape {
            InclusionShape::Circle { radius } => *radius,
            InclusionShape::Triangle { circumradius, .. } => *circumradius,
            InclusionShape::Blob { r0, amplitudes, .. } => {
                r0 * (1.0 + amplitudes.iter().map(|a| a.abs()).sum::<f64>())
            }
            InclusionShape::Horseshoe { r_outer, .. } => *r_outer,
        }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        match &self.shape {
            InclusionShape::Circle { radius } => dx * dx + dy * dy <= radius * radius,
            InclusionShape::Triangle { circumradius, angle } => {
                // Vertices of the rotated equilateral template.
                let mut verts = [[0.0; 2]; 3];
                for (k, v) in verts.iter_mut().enumerate() {
                    let a = angle + 2.0 * std::f64::consts::PI * k as f64 / 3.0;
                    *v = [circumradius * a.cos(), circumradius * a.sin()];
                }
                let q = [dx, dy];
                (0..3).all(|i| {
                    let a = verts[i];
                    let b = verts[(i + 1) % 3];
                    (b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0]) >= 0.0
                })
            }
            InclusionShape::Blob {
                r0,
                amplitudes,
                phases,
            } => {
                let r = (dx * dx + dy * dy).sqrt();
                let theta = dy.atan2(dx);
                let mut boundary = 1.0;
                for (k, (a, phi)) in amplitudes.iter().zip(phases).enumerate() {
                    boundary += a * ((k as f64 + 1.0) * theta + phi).cos();
                }
                r <= r0 * boundary
            }
            InclusionShape::Horseshoe {
                r_inner,
                r_outer,
                gap_angle,
                opening,
            } => {
                let r = (dx * dx + dy * dy).sqrt();
                if r < *r_inner || r > *r_outer {
                    return false;
                }
                let theta = dy.atan2(dx);
                let mut delta = theta - gap_angle;
                while delta > std::f64::consts::PI {
                    delta -= 2.0 * std::f64::consts::PI;
                }
                while delta < -std::f64::consts::PI {
                    delta += 2.0 * std::f64::consts::PI;
                }
                delta.abs() >= opening / 2.0
            }
        }
    }
}

/// A phantom: background conductivity plus a few inclusions. Later-listed
/// inclusions win where shapes overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub inclusions: Vec<Inclusion>,
    pub background: f64,
}

/// Shape family selector for dataset generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeFamily {
    Circle,
    Triangle,
    Blob,
    Horseshoe,
}

impl ShapeFamily {
    pub fn as_str(&self) -> &'static str {
        match self {
            ShapeFamily::Circle => "circle",
            ShapeFamily::Triangle => "triangle",
            ShapeFamily::Blob => "blob",
            ShapeFamily::Horseshoe => "horseshoe",
        }
    }

    pub fn parse(s: &str) -> Option<ShapeFamily> {
        match s {
            "circle" => Some(ShapeFamily::Circle),
            "triangle" => Some(ShapeFamily::Triangle),
            "blob" => Some(ShapeFamily::Blob),
            "horseshoe" => Some(ShapeFamily::Horseshoe),
            _ => None,
        }
    }
}

/// Dataset recipe: shape family, sample count, conductivity and inclusion
/// count ranges, size ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub family: ShapeFamily,
    pub count: usize,
    pub conductivity_range: (f64, f64),
    pub inclusion_count_range: (usize, usize),
    /// Circle radius / triangle circumradius / blob r0 range.
    pub size_range: (f64, f64),
    pub base_seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(GraphDpsError::Phantom("dataset count must be >= 1".into()));
        }
        let (lo, hi) = self.conductivity_range;
        if !(lo <= hi && lo > 0.0) {
            return Err(GraphDpsError::Phantom(format!(
                "invalid conductivity range [{lo}, {hi}]"
            )));
        }
        let (clo, chi) = self.inclusion_count_range;
        if clo == 0 || clo > chi {
            return Err(GraphDpsError::Phantom(format!(
                "invalid inclusion count range [{clo}, {chi}]"
            )));
        }
        let (slo, shi) = self.size_range;
        if !(slo <= shi && slo > 0.0) {
            return Err(GraphDpsError::Phantom(format!(
                "invalid size range [{slo}, {shi}]"
            )));
        }
        Ok(())
    }
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            family: ShapeFamily::Circle,
            count: 200,
            conductivity_range: (0.5, 1.5),
            inclusion_count_range: (1, 3),
            size_range: (0.12, 0.3),
            base_seed: 0,
        }
    }
}

const BLOB_MODES: usize = 4;
const BLOB_AMPLITUDE_BUDGET: f64 = 0.35;

/// Draw one phantom from the spec; deterministic per seed. Centers and
/// sizes are rejection-sampled until the inclusion fits inside the disk
/// with the containment margin.
pub fn sample_phantom(spec: &DatasetSpec, seed: u64) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = seeds::rng(seed, "phantom");
    let (clo, chi) = spec.inclusion_count_range;
    let count = rng.gen_range(clo..=chi);
    let mut inclusions = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _try in 0..1000 {
            let size = rng.gen_range(spec.size_range.0..=spec.size_range.1);
            let shape = match spec.family {
                ShapeFamily::Circle => InclusionShape::Circle { radius: size },
                ShapeFamily::Triangle => InclusionShape::Triangle {
                    circumradius: size,
                    angle: rng.gen_range(0.0..2.0 * std::f64::consts::PI),
                },
                ShapeFamily::Blob => {
                    let amplitudes: Vec<f64> = (0..BLOB_MODES)
                        .map(|_| rng.gen_range(0.0..BLOB_AMPLITUDE_BUDGET / BLOB_MODES as f64))
                        .collect();
                    let phases: Vec<f64> = (0..BLOB_MODES)
                        .map(|_| rng.gen_range(0.0..2.0 * std::f64::consts::PI))
                        .collect();
                    InclusionShape::Blob {
                        r0: size,
                        amplitudes,
                        phases,
                    }
                }
                ShapeFamily::Horseshoe => {
                    let r_outer = size.max(0.1);
                    let r_inner = r_outer * rng.gen_range(0.4..0.7);
                    InclusionShape::Horseshoe {
                        r_inner,
                        r_outer,
                        gap_angle: rng.gen_range(0.0..2.0 * std::f64::consts::PI),
                        opening: rng.gen_range(0.6..1.6),
                    }
                }
            };
            let conductivity =
                rng.gen_range(spec.conductivity_range.0..=spec.conductivity_range.1);
            // Uniform center over the disk, then containment check.
            let u: f64 = rng.gen();
            let v: f64 = rng.gen();
            let r = u.sqrt();
            let t = 2.0 * std::f64::consts::PI * v;
            let center = [r * t.cos(), r * t.sin()];
            let candidate = Inclusion {
                shape,
                center,
                conductivity,
            };
            let reach = (center[0].powi(2) + center[1].powi(2)).sqrt() + candidate.extent();
            if reach <= 1.0 - CONTAINMENT_MARGIN {
                inclusions.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(GraphDpsError::Phantom(
                "rejection budget exhausted while placing inclusion".into(),
            ));
        }
    }
    Ok(Phantom {
        inclusions,
        background: 1.0,
    })
}

/// Evaluate the phantom at a point: conductivity of the last-listed
/// inclusion containing it, else the background.
pub fn evaluate_at(phantom: &Phantom, p: [f64; 2]) -> f64 {
    let mut value = phantom.background;
    for inc in &phantom.inclusions {
        if inc.contains(p) {
            value = inc.conductivity;
        }
    }
    value
}

/// Rasterize the phantom onto mesh nodes.
pub fn rasterize(phantom: &Phantom, mesh: &TriMesh) -> NodeField {
    NodeField::new(
        mesh.vertices
            .iter()
            .map(|&v| evaluate_at(phantom, v))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_disk_mesh;

    fn circle_spec() -> DatasetSpec {
        DatasetSpec {
            base_seed: 7,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn conductivities_stay_in_range() {
        let spec = circle_spec();
        for seed in 0..50 {
            let ph = sample_phantom(&spec, seed).unwrap();
            for inc in &ph.inclusions {
                assert!(inc.conductivity >= 0.5 && inc.conductivity <= 1.5);
            }
            assert_eq!(ph.background, 1.0);
        }
    }

    #[test]
    fn blob_family_uses_wider_range() {
        let spec = DatasetSpec {
            family: ShapeFamily::Blob,
            conductivity_range: (0.3, 1.7),
            ..DatasetSpec::default()
        };
        let mut seen_low = false;
        let mut seen_high = false;
        for seed in 0..300 {
            let ph = sample_phantom(&spec, seed).unwrap();
            for inc in &ph.inclusions {
                assert!(inc.conductivity >= 0.3 && inc.conductivity <= 1.7);
                seen_low |= inc.conductivity < 0.5;
                seen_high |= inc.conductivity > 1.5;
            }
        }
        assert!(seen_low && seen_high, "wider range not exercised");
    }

    #[test]
    fn same_seed_same_phantom() {
        let spec = circle_spec();
        let a = sample_phantom(&spec, 42).unwrap();
        let b = sample_phantom(&spec, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn inclusions_respect_containment_margin() {
        for family in [
            ShapeFamily::Circle,
            ShapeFamily::Triangle,
            ShapeFamily::Blob,
            ShapeFamily::Horseshoe,
        ] {
            let spec = DatasetSpec {
                family,
                ..DatasetSpec::default()
            };
            for seed in 0..30 {
                let ph = sample_phantom(&spec, seed).unwrap();
                for inc in &ph.inclusions {
                    let reach =
                        (inc.center[0].powi(2) + inc.center[1].powi(2)).sqrt() + inc.extent();
                    assert!(reach <= 1.0 - CONTAINMENT_MARGIN + 1e-12);
                }
            }
        }
    }

    #[test]
    fn empty_phantom_rasterizes_to_background() {
        let mesh = build_disk_mesh(100, 1).unwrap();
        let ph = Phantom {
            inclusions: vec![],
            background: 1.0,
        };
        let field = rasterize(&ph, &mesh);
        assert!(field.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn circle_rasterization_matches_containment() {
        let mesh = build_disk_mesh(300, 5).unwrap();
        let ph = Phantom {
            inclusions: vec![Inclusion {
                shape: InclusionShape::Circle { radius: 0.3 },
                center: [0.0, 0.0],
                conductivity: 1.5,
            }],
            background: 1.0,
        };
        let field = rasterize(&ph, &mesh);
        for (i, v) in mesh.vertices.iter().enumerate() {
            let r = (v[0] * v[0] + v[1] * v[1]).sqrt();
            if r <= 0.3 {
                assert_eq!(field.values[i], 1.5);
            } else {
                assert_eq!(field.values[i], 1.0);
            }
        }
    }

    #[test]
    fn later_inclusion_wins_overlap() {
        let ph = Phantom {
            inclusions: vec![
                Inclusion {
                    shape: InclusionShape::Circle { radius: 0.3 },
                    center: [0.0, 0.0],
                    conductivity: 1.5,
                },
                Inclusion {
                    shape: InclusionShape::Circle { radius: 0.15 },
                    center: [0.0, 0.0],
                    conductivity: 0.6,
                },
            ],
            background: 1.0,
        };
        assert_eq!(evaluate_at(&ph, [0.0, 0.0]), 0.6);
        assert_eq!(evaluate_at(&ph, [0.2, 0.0]), 1.5);
        assert_eq!(evaluate_at(&ph, [0.9, 0.0]), 1.0);
    }

    #[test]
    fn triangle_membership_is_rotation_consistent() {
        let inc = Inclusion {
            shape: InclusionShape::Triangle {
                circumradius: 0.3,
                angle: 0.0,
            },
            center: [0.0, 0.0],
            conductivity: 1.2,
        };
        assert!(inc.contains([0.0, 0.0]));
        assert!(inc.contains([0.25, 0.0]));
        assert!(!inc.contains([-0.25, 0.0]));
        assert!(!inc.contains([0.0, 0.5]));
    }

    #[test]
    fn horseshoe_has_gap() {
        let inc = Inclusion {
            shape: InclusionShape::Horseshoe {
                r_inner: 0.1,
                r_outer: 0.3,
                gap_angle: 0.0,
                opening: 1.0,
            },
            center: [0.0, 0.0],
            conductivity: 1.4,
        };
        // Inside the annulus away from the gap.
        assert!(inc.contains([-0.2, 0.0]));
        // In the gap sector.
        assert!(!inc.contains([0.2, 0.0]));
        // Inside the hole.
        assert!(!inc.contains([0.0, 0.05]));
    }

    #[test]
    fn inclusion_conductivities_uniform_ks() {
        // Kolmogorov-Smirnov statistic of inclusion conductivities over 1000
        // samples against U[0.5, 1.5].
        let spec = circle_spec();
        let mut values = Vec::new();
        for seed in 0..1000 {
            let ph = sample_phantom(&spec, seed).unwrap();
            for inc in &ph.inclusions {
                values.push((inc.conductivity - 0.5) / 1.0);
            }
        }
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = values.len() as f64;
        let mut ks: f64 = 0.0;
        for (i, v) in values.iter().enumerate() {
            let emp_lo = i as f64 / n;
            let emp_hi = (i as f64 + 1.0) / n;
            ks = ks.max((v - emp_lo).abs()).max((v - emp_hi).abs());
        }
        assert!(ks < 0.05, "KS statistic {ks}");
    }

    #[test]
    fn fine_and_coarse_rasterizations_agree_at_probes() {
        use rand::Rng;
        let fine = build_disk_mesh(520, 100).unwrap();
        let coarse = build_disk_mesh(320, 200).unwrap();
        let spec = circle_spec();
        let ph = sample_phantom(&spec, 3).unwrap();
        let f_fine = rasterize(&ph, &fine);
        let f_coarse = rasterize(&ph, &coarse);
        let h = coarse.mean_edge_length();

        let nearest = |mesh: &TriMesh, p: [f64; 2]| -> usize {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (i, v) in mesh.vertices.iter().enumerate() {
                let d = (v[0] - p[0]).powi(2) + (v[1] - p[1]).powi(2);
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            best
        };
        // Distance from p to the nearest inclusion boundary, approximated by
        // probing a small ring around p.
        let boundary_dist = |p: [f64; 2]| -> f64 {
            let here = evaluate_at(&ph, p);
            let mut lo = 0.0;
            let mut hi = 2.0 * h;
            let crossing = (0..16).any(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / 16.0;
                evaluate_at(&ph, [p[0] + hi * a.cos(), p[1] + hi * a.sin()]) != here
            });
            if !crossing {
                return hi;
            }
            for _ in 0..20 {
                let mid = 0.5 * (lo + hi);
                let crosses = (0..16).any(|k| {
                    let a = 2.0 * std::f64::consts::PI * k as f64 / 16.0;
                    evaluate_at(&ph, [p[0] + mid * a.cos(), p[1] + mid * a.sin()]) != here
                });
                if crosses {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            lo
        };

        let mut rng = seeds::rng(9, "probe");
        let mut checked = 0;
        for _ in 0..100 {
            let u: f64 = rng.gen();
            let v: f64 = rng.gen();
            let r = 0.9 * u.sqrt();
            let t = 2.0 * std::f64::consts::PI * v;
            let p = [r * t.cos(), r * t.sin()];
            // Probes near a shape boundary are ambiguous at mesh resolution.
            if boundary_dist(p) < 1.5 * h {
                continue;
            }
            let oracle = evaluate_at(&ph, p);
            assert_eq!(f_fine.values[nearest(&fine, p)], oracle);
            assert_eq!(f_coarse.values[nearest(&coarse, p)], oracle);
            checked += 1;
        }
        assert!(checked >= 30, "only {checked} unambiguous probes");
    }
}

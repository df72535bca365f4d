use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::alignment::ClassId;
use crate::geometry::{Calibration, LabelGrid};

/// Instance id written to pixels that hit nothing.
pub const NO_INSTANCE: usize = usize::MAX;

const HIT_EPS: f64 = 1e-9;

/// Scene primitives. Boxes and cylinders stand on the ground plane (z = 0).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Primitive {
    /// Square patch `[-extent, extent]²` at z = 0.
    Ground { extent: f64 },
    Box {
        center: [f64; 2],
        half: [f64; 2],
        height: f64,
        yaw: f64,
    },
    Cylinder {
        center: [f64; 2],
        radius: f64,
        height: f64,
    },
}

impl Primitive {
    /// Radius of the xy footprint's bounding circle (0 for the ground).
    pub fn footprint_radius(&self) -> f64 {
        match self {
            Primitive::Ground { .. } => 0.0,
            Primitive::Box { half, .. } => half[0].hypot(half[1]),
            Primitive::Cylinder { radius, .. } => *radius,
        }
    }

    /// Whether the xy position lies inside the footprint.
    pub fn covers_xy(&self, x: f64, y: f64) -> bool {
        match self {
            Primitive::Ground { extent } => x.abs() <= *extent && y.abs() <= *extent,
            Primitive::Box {
                center, half, yaw, ..
            } => {
                let (lx, ly) = to_local(x - center[0], y - center[1], *yaw);
                lx.abs() <= half[0] && ly.abs() <= half[1]
            }
            Primitive::Cylinder { center, radius, .. } => {
                (x - center[0]).hypot(y - center[1]) <= *radius
            }
        }
    }

    /// Smallest ray parameter `t > 0` where `origin + t·dir` hits the surface.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        match self {
            Primitive::Ground { extent } => {
                if dir.z.abs() < 1e-12 {
                    return None;
                }
                let t = -origin.z / dir.z;
                let p = origin + dir * t;
                (t > HIT_EPS && p.x.abs() <= *extent && p.y.abs() <= *extent).then_some(t)
            }
            Primitive::Box {
                center,
                half,
                height,
                yaw,
            } => {
                let (ox, oy) = to_local(origin.x - center[0], origin.y - center[1], *yaw);
                let (dx, dy) = to_local(dir.x, dir.y, *yaw);
                let o = [ox, oy, origin.z];
                let d = [dx, dy, dir.z];
                let lo = [-half[0], -half[1], 0.0];
                let hi = [half[0], half[1], *height];
                slab(&o, &d, &lo, &hi)
            }
            Primitive::Cylinder {
                center,
                radius,
                height,
            } => {
                let ox = origin.x - center[0];
                let oy = origin.y - center[1];
                let mut best: Option<f64> = None;
                let mut consider = |t: f64| {
                    if t > HIT_EPS && best.is_none_or(|b| t < b) {
                        best = Some(t);
                    }
                };
                let a = dir.x * dir.x + dir.y * dir.y;
                if a > 1e-15 {
                    let b = 2.0 * (ox * dir.x + oy * dir.y);
                    let c = ox * ox + oy * oy - radius * radius;
                    let disc = b * b - 4.0 * a * c;
                    if disc >= 0.0 {
                        let s = disc.sqrt();
                        for t in [(-b - s) / (2.0 * a), (-b + s) / (2.0 * a)] {
                            let z = origin.z + t * dir.z;
                            if (0.0..=*height).contains(&z) {
                                consider(t);
                            }
                        }
                    }
                }
                if dir.z.abs() > 1e-12 {
                    for zc in [0.0, *height] {
                        let t = (zc - origin.z) / dir.z;
                        let x = ox + t * dir.x;
                        let y = oy + t * dir.y;
                        if x * x + y * y <= radius * radius {
                            consider(t);
                        }
                    }
                }
                best
            }
        }
    }
}

fn to_local(x: f64, y: f64, yaw: f64) -> (f64, f64) {
    let (s, c) = yaw.sin_cos();
    (c * x + s * y, -s * x + c * y)
}

fn slab(o: &[f64; 3], d: &[f64; 3], lo: &[f64; 3], hi: &[f64; 3]) -> Option<f64> {
    let mut tmin = f64::NEG_INFINITY;
    let mut tmax = f64::INFINITY;
    for k in 0..3 {
        if d[k].abs() < 1e-15 {
            if o[k] < lo[k] || o[k] > hi[k] {
                return None;
            }
            continue;
        }
        let a = (lo[k] - o[k]) / d[k];
        let b = (hi[k] - o[k]) / d[k];
        tmin = tmin.max(a.min(b));
        tmax = tmax.min(a.max(b));
    }
    if tmax < tmin || tmax <= HIT_EPS {
        return None;
    }
    Some(if tmin > HIT_EPS { tmin } else { tmax })
}

/// One primitive with its class; its index in the scene is its instance id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObject {
    pub class: ClassId,
    pub shape: Primitive,
}

/// Per-pixel nearest-surface results for one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    pub labels: LabelGrid,
    pub instances: LabelGrid,
    /// Camera-frame depth of the visible surface, `INFINITY` on background.
    pub depth: Vec<f64>,
    /// World-frame hit points (meaningless where depth is infinite).
    pub hits: Vec<Vector3<f64>>,
}

/// Z-buffered ray casting through every pixel centre.
pub fn render_view(objects: &[SceneObject], calib: &Calibration, ignore: ClassId) -> RenderedView {
    let (w, h) = (calib.width, calib.height);
    let mut labels = LabelGrid::filled(w, h, ignore);
    let mut instances = LabelGrid::filled(w, h, NO_INSTANCE);
    let mut depth = vec![f64::INFINITY; w * h];
    let mut hits = vec![Vector3::zeros(); w * h];
    let origin = calib.center();
    for row in 0..h {
        for col in 0..w {
            let dir = calib.ray_direction(col as f64, row as f64);
            let mut best: Option<(f64, usize)> = None;
            for (i, obj) in objects.iter().enumerate() {
                if let Some(t) = obj.shape.intersect(&origin, &dir) {
                    if best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, i));
                    }
                }
            }
            if let Some((t, i)) = best {
                let p = origin + dir * t;
                let idx = row * w + col;
                labels.data[idx] = objects[i].class;
                instances.data[idx] = i;
                depth[idx] = calib.to_camera(&p).z;
                hits[idx] = p;
            }
        }
    }
    RenderedView {
        labels,
        instances,
        depth,
        hits,
    }
}

/// Class id of the nearest surface per pixel; background is `ignore`.
pub fn render_label_image(objects: &[SceneObject], calib: &Calibration, ignore: ClassId) -> LabelGrid {
    render_view(objects, calib, ignore).labels
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> Calibration {
        Calibration::look_at(
            Vector3::new(-8.0, 0.0, 1.0),
            Vector3::new(0.0, 0.0, 1.0),
            40.0,
            32,
            32,
        )
        .unwrap()
    }

    #[test]
    fn box_filling_frustum_covers_every_pixel() {
        let objects = [SceneObject {
            class: 2,
            shape: Primitive::Box {
                center: [0.0, 0.0],
                half: [4.0, 50.0],
                height: 50.0,
                yaw: 0.0,
            },
        }];
        let c = Calibration::look_at(
            Vector3::new(-8.0, 0.0, 25.0),
            Vector3::new(0.0, 0.0, 25.0),
            40.0,
            32,
            32,
        )
        .unwrap();
        let img = render_label_image(&objects, &c, 5);
        assert!(img.data.iter().all(|&c| c == 2));
    }

    #[test]
    fn empty_scene_is_background() {
        let img = render_label_image(&[], &cam(), 5);
        assert!(img.data.iter().all(|&c| c == 5));
    }

    #[test]
    fn nearer_primitive_wins() {
        let boxed = SceneObject {
            class: 1,
            shape: Primitive::Box {
                center: [-3.0, 0.0],
                half: [0.5, 0.5],
                height: 2.0,
                yaw: 0.3,
            },
        };
        let cylinder = SceneObject {
            class: 3,
            shape: Primitive::Cylinder {
                center: [2.0, 0.0],
                radius: 1.5,
                height: 3.0,
            },
        };
        let c = cam();
        // the central pixel ray runs along +x at z = 1: box face at x ≈ -3.5,
        // cylinder face at x = 0.5
        let centre = (16, 16);
        let dir = c.ray_direction(centre.0 as f64, centre.1 as f64);
        let tb = boxed.shape.intersect(&c.center(), &dir).unwrap();
        let tc = cylinder.shape.intersect(&c.center(), &dir).unwrap();
        assert!(tb < tc);
        for objects in [[boxed.clone(), cylinder.clone()], [cylinder, boxed]] {
            let img = render_label_image(&objects, &c, 5);
            assert_eq!(img.get(centre.0, centre.1), 1);
        }
    }

    #[test]
    fn ground_hit_depth_matches_geometry() {
        let objects = [SceneObject {
            class: 0,
            shape: Primitive::Ground { extent: 10.0 },
        }];
        let c = cam();
        let view = render_view(&objects, &c, 5);
        for (i, &d) in view.depth.iter().enumerate() {
            if d.is_finite() {
                let p = view.hits[i];
                assert!(p.z.abs() < 1e-9);
                assert!((c.to_camera(&p).z - d).abs() < 1e-12);
            }
        }
        // top half of the image looks above the horizon
        assert_eq!(view.labels.get(16, 2), 5);
        assert_eq!(view.labels.get(16, 30), 0);
    }

    #[test]
    fn cylinder_intersection_agrees_with_sampling() {
        let shape = Primitive::Cylinder {
            center: [0.5, -0.2],
            radius: 0.8,
            height: 1.3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let o = Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(0.0..4.0));
            if shape.covers_xy(o.x, o.y) && o.z <= 1.3 {
                continue;
            }
            let target = Vector3::new(rng.gen_range(-1.0..2.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.0..1.5));
            let dir = (target - o).normalize();
            // march the ray and find the first inside sample
            let inside = |p: Vector3<f64>| shape.covers_xy(p.x, p.y) && (0.0..=1.3).contains(&p.z);
            let mut marched = None;
            let mut t = 0.0;
            while t < 12.0 {
                if inside(o + dir * t) {
                    marched = Some(t);
                    break;
                }
                t += 1e-3;
            }
            match (shape.intersect(&o, &dir), marched) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 2e-3, "{a} vs {b}"),
                (None, None) => {}
                (a, b) => {
                    // grazing rays may disagree within one marching step
                    let t = a.or(b).unwrap();
                    let p = o + dir * t;
                    let r = (p.x - 0.5).hypot(p.y + 0.2);
                    assert!((r - 0.8).abs() < 5e-3 || p.z.abs() < 5e-3 || (p.z - 1.3).abs() < 5e-3);
                }
            }
        }
    }
}

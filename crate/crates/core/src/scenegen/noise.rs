use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::render::{render_view, SceneObject, NO_INSTANCE};
use crate::alignment::{ClassId, ClassVocabulary};
use crate::error::{Error, Result};
use crate::geometry::{Calibration, LabelGrid};

/// Corruption applied when rendering pseudo-label images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseModel {
    /// Std-dev of the extrinsic rotation jitter per axis (radians).
    pub sigma_rot: f64,
    /// Std-dev of the extrinsic translation jitter per axis (meters).
    pub sigma_trans: f64,
    pub p_flip: f64,
    pub p_drop: f64,
    /// Boundary dilation radius in pixels.
    pub dilation: usize,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma_rot: 1f64.to_radians(),
            sigma_trans: 0.05,
            p_flip: 0.1,
            p_drop: 0.1,
            dilation: 2,
        }
    }
}

impl NoiseModel {
    pub fn none() -> Self {
        Self {
            sigma_rot: 0.0,
            sigma_trans: 0.0,
            p_flip: 0.0,
            p_drop: 0.0,
            dilation: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_flip", self.p_flip), ("p_drop", self.p_drop)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("noise.{name} = {p} is not a probability")));
            }
        }
        for (name, s) in [("sigma_rot", self.sigma_rot), ("sigma_trans", self.sigma_trans)] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::config(format!("noise.{name} = {s} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// What `corrupt_labels` did to one image.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionReport {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
    /// Instances whose pixels were erased.
    pub dropped: Vec<usize>,
    /// Surviving instances relabelled, as (instance, new class).
    pub flipped: Vec<(usize, ClassId)>,
    /// Number of instances that survived dropout (flip trials).
    pub survivors: usize,
}

/// Pseudo-label image for one camera: re-render under jittered extrinsics,
/// drop and flip whole instances, then grow instance masks into their
/// surroundings by `dilation` pixels.
pub fn corrupt_labels(
    objects: &[SceneObject],
    calib: &Calibration,
    vocab: &ClassVocabulary,
    noise: &NoiseModel,
    seed: u64,
) -> Result<(LabelGrid, CorruptionReport)> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ignore = vocab.ignore();
    let mut report = CorruptionReport::default();

    let jittered = if noise.sigma_rot > 0.0 || noise.sigma_trans > 0.0 {
        let rot = sample3(&mut rng, noise.sigma_rot);
        let trans = sample3(&mut rng, noise.sigma_trans);
        report.rotation = [rot.x, rot.y, rot.z];
        report.translation = [trans.x, trans.y, trans.z];
        calib.perturbed(rot, trans)
    } else {
        calib.clone()
    };
    let view = render_view(objects, &jittered, ignore);

    let mut class_of: Vec<ClassId> = objects.iter().map(|o| o.class).collect();
    for (inst, class) in class_of.iter_mut().enumerate() {
        if rng.gen_bool(noise.p_drop) {
            report.dropped.push(inst);
            *class = ignore;
            continue;
        }
        report.survivors += 1;
        if vocab.len() > 1 && rng.gen_bool(noise.p_flip) {
            let mut other = rng.gen_range(0..vocab.len() - 1);
            if other >= *class {
                other += 1;
            }
            report.flipped.push((inst, other));
            *class = other;
        }
    }

    let mut labels = LabelGrid::filled(view.labels.width, view.labels.height, ignore);
    for (dst, &inst) in labels.data.iter_mut().zip(&view.instances.data) {
        if inst != NO_INSTANCE {
            *dst = class_of[inst];
        }
    }
    Ok((dilate(&labels, noise.dilation, ignore, vocab.len()), report))
}

fn sample3(rng: &mut ChaCha8Rng, sigma: f64) -> Vector3<f64> {
    if sigma == 0.0 {
        return Vector3::zeros();
    }
    let n = Normal::new(0.0, sigma).expect("sigma checked");
    Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng))
}

/// Mode filter over a (2r+1)² window in which background does not vote, so
/// labelled regions spread over up to `r` pixels of background and into
/// each other along shared edges. Ties go to the lowest class id.
pub fn dilate(labels: &LabelGrid, radius: usize, ignore: ClassId, classes: usize) -> LabelGrid {
    if radius == 0 {
        return labels.clone();
    }
    let (w, h) = (labels.width, labels.height);
    let r = radius as isize;
    let mut out = labels.clone();
    let mut votes = vec![0usize; classes];
    for row in 0..h {
        for col in 0..w {
            votes.iter_mut().for_each(|v| *v = 0);
            let mut distinct = false;
            let centre = labels.get(col, row);
            for dr in -r..=r {
                for dc in -r..=r {
                    let rr = row as isize + dr;
                    let cc = col as isize + dc;
                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                        continue;
                    }
                    let l = labels.get(cc as usize, rr as usize);
                    if l != centre {
                        distinct = true;
                    }
                    if l != ignore {
                        votes[l] += 1;
                    }
                }
            }
            if !distinct {
                continue;
            }
            let mut best = ignore;
            let mut best_votes = 0;
            for (c, &v) in votes.iter().enumerate() {
                if v > best_votes {
                    best = c;
                    best_votes = v;
                }
            }
            out.set(col, row, best);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::render::{render_label_image, Primitive};
    use crate::scenegen::tests::{small_spec, vocab};
    use crate::scenegen::generate_scene;

    #[test]
    fn zero_noise_is_identity() {
        let v = vocab();
        let scene = generate_scene(&small_spec(), &NoiseModel::none(), &v, 3).unwrap();
        for (cal, gt) in scene.calibrations.iter().zip(&scene.gt_labels) {
            let (img, report) = corrupt_labels(&scene.objects, cal, &v, &NoiseModel::none(), 9).unwrap();
            assert_eq!(&img, gt);
            assert!(report.dropped.is_empty() && report.flipped.is_empty());
        }
    }

    #[test]
    fn total_dropout_erases_everything() {
        let v = vocab();
        let scene = generate_scene(&small_spec(), &NoiseModel::none(), &v, 3).unwrap();
        let noise = NoiseModel {
            p_drop: 1.0,
            ..NoiseModel::default()
        };
        let (img, _) = corrupt_labels(&scene.objects, &scene.calibrations[0], &v, &noise, 1).unwrap();
        assert!(img.data.iter().all(|&c| c == v.ignore()));
    }

    #[test]
    fn flip_rate_within_binomial_band() {
        let v = vocab();
        let noise = NoiseModel {
            p_flip: 0.3,
            ..NoiseModel::none()
        };
        let (mut trials, mut flips) = (0, 0);
        let mut seed = 0;
        while trials < 200 {
            let scene = generate_scene(&small_spec(), &NoiseModel::none(), &v, seed).unwrap();
            let (_, report) = corrupt_labels(&scene.objects, &scene.calibrations[0], &v, &noise, seed).unwrap();
            trials += report.survivors;
            flips += report.flipped.len();
            for &(inst, class) in &report.flipped {
                assert_ne!(class, scene.objects[inst].class);
            }
            seed += 1;
        }
        let frac = flips as f64 / trials as f64;
        assert!((frac - 0.3).abs() <= 0.07, "flip fraction {frac} over {trials}");
    }

    #[test]
    fn jitter_only_disagrees_near_silhouettes() {
        let v = vocab();
        let noise = NoiseModel {
            sigma_rot: 1f64.to_radians(),
            sigma_trans: 0.05,
            ..NoiseModel::none()
        };
        for seed in 0..3 {
            let scene = generate_scene(&small_spec(), &NoiseModel::none(), &v, seed).unwrap();
            for (k, cal) in scene.calibrations.iter().enumerate() {
                let (img, report) = corrupt_labels(&scene.objects, cal, &v, &noise, seed * 7 + k as u64).unwrap();
                let rot = Vector3::from(report.rotation);
                let trans = Vector3::from(report.translation);
                let jittered = cal.perturbed(rot, trans);
                // bound: largest pixel displacement of any visible surface point
                let view = render_view(&scene.objects, cal, v.ignore());
                let mut bound: f64 = 0.0;
                for (i, p) in view.hits.iter().enumerate() {
                    if !view.depth[i].is_finite() {
                        continue;
                    }
                    let a = cal.project_camera(&cal.to_camera(p));
                    let b = jittered.project_camera(&jittered.to_camera(p));
                    if let (Some(a), Some(b)) = (a, b) {
                        bound = bound.max((a.0 - b.0).hypot(a.1 - b.1));
                    }
                }
                let gt = &scene.gt_labels[k];
                let reach = bound.ceil() as isize + 1;
                for row in 0..gt.height {
                    for col in 0..gt.width {
                        if img.get(col, row) == gt.get(col, row) {
                            continue;
                        }
                        assert!(
                            near_boundary(gt, col, row, reach),
                            "pixel ({col},{row}) differs farther than {reach}px from a boundary"
                        );
                    }
                }
            }
        }
    }

    fn near_boundary(gt: &LabelGrid, col: usize, row: usize, reach: isize) -> bool {
        let c = gt.get(col, row);
        for dr in -reach..=reach {
            for dc in -reach..=reach {
                let rr = row as isize + dr;
                let cc = col as isize + dc;
                if rr < 0 || cc < 0 || rr >= gt.height as isize || cc >= gt.width as isize {
                    // the frame edge counts as a boundary: content shifts in
                    return true;
                }
                if gt.get(cc as usize, rr as usize) != c {
                    return true;
                }
            }
        }
        false
    }

    #[test]
    fn dilation_grows_regions_into_background() {
        let mut g = LabelGrid::filled(9, 9, 5);
        g.set(4, 4, 2);
        let d = dilate(&g, 1, 5, 5);
        for row in 0..9 {
            for col in 0..9 {
                let inside = (3..=5).contains(&row) && (3..=5).contains(&col);
                assert_eq!(d.get(col, row) == 2, inside);
            }
        }
        assert_eq!(dilate(&g, 0, 5, 5), g);
    }

    #[test]
    fn labels_follow_instances() {
        let v = vocab();
        let objects = vec![
            SceneObject {
                class: 0,
                shape: Primitive::Ground { extent: 5.0 },
            },
            SceneObject {
                class: 3,
                shape: Primitive::Cylinder {
                    center: [0.0, 0.0],
                    radius: 1.0,
                    height: 2.0,
                },
            },
        ];
        let cal = Calibration::look_at(
            Vector3::new(-7.0, 0.0, 2.0),
            Vector3::new(0.0, 0.0, 0.5),
            60.0,
            48,
            48,
        )
        .unwrap();
        let gt = render_label_image(&objects, &cal, v.ignore());
        let (img, _) = corrupt_labels(&objects, &cal, &v, &NoiseModel::none(), 0).unwrap();
        assert_eq!(img, gt);
        assert!(gt.data.contains(&3) && gt.data.contains(&0));
    }
}

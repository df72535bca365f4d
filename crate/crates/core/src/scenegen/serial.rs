use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use super::render::{SceneObject, NO_INSTANCE};
use super::{CorruptionReport, SyntheticScene};
use crate::alignment::{ClassId, FeatureImage};
use crate::codec::Array;
use crate::error::{Error, Result};
use crate::geometry::{Calibration, LabelGrid, PointCloud};

pub(crate) const SCENE_FORMAT: &str = "crossmodal-scene/1";

fn to_i32(v: usize) -> i32 {
    if v == NO_INSTANCE {
        -1
    } else {
        i32::try_from(v).expect("id fits in int32")
    }
}

fn from_i32(v: i32, what: &str) -> Result<usize> {
    match v {
        -1 => Ok(NO_INSTANCE),
        v if v >= 0 => Ok(v as usize),
        v => Err(Error::data(format!("negative {what} {v}"))),
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraDoc {
    width: usize,
    height: usize,
    intrinsic: Array,
    extrinsic: Array,
    features: Array,
    gt_labels: Array,
    gt_instances: Array,
    pseudo_labels: Array,
    corruption: CorruptionReport,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneDoc {
    format: String,
    seed: u64,
    num_points: usize,
    objects: Vec<SceneObject>,
    coords: Array,
    intensity: Array,
    gt_labels: Array,
    base_mask: Array,
    point_instances: Array,
    cameras: Vec<CameraDoc>,
}

fn grid_array(g: &LabelGrid) -> Array {
    Array::i32(vec![g.height, g.width], g.data.iter().map(|&v| to_i32(v)))
}

fn grid_from(a: &Array, w: usize, h: usize, what: &str) -> Result<LabelGrid> {
    a.expect_shape(&[h, w], what)?;
    let data = a
        .to_i32()?
        .into_iter()
        .map(|v| from_i32(v, what))
        .collect::<Result<Vec<ClassId>>>()?;
    Ok(LabelGrid {
        width: w,
        height: h,
        data,
    })
}

pub fn scene_to_json(scene: &SyntheticScene) -> String {
    let n = scene.num_points();
    let coords: Vec<f64> = scene.cloud.coords.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    let cameras = scene
        .calibrations
        .iter()
        .enumerate()
        .map(|(k, cal)| {
            let img = &scene.images[k];
            CameraDoc {
                width: cal.width,
                height: cal.height,
                intrinsic: Array::f64(vec![3, 3], cal.intrinsic.transpose().as_slice()),
                extrinsic: Array::f64(vec![4, 4], cal.extrinsic.transpose().as_slice()),
                features: Array::f64(vec![img.height, img.width, img.channels], &img.data),
                gt_labels: grid_array(&scene.gt_labels[k]),
                gt_instances: grid_array(&scene.gt_instances[k]),
                pseudo_labels: grid_array(&scene.pseudo_labels[k]),
                corruption: scene.corruption[k].clone(),
            }
        })
        .collect();
    let doc = SceneDoc {
        format: SCENE_FORMAT.into(),
        seed: scene.seed,
        num_points: n,
        objects: scene.objects.clone(),
        coords: Array::f64(vec![n, 3], &coords),
        intensity: Array::f64(vec![n], &scene.cloud.intensity),
        gt_labels: Array::i32(vec![n], scene.gt().iter().map(|&v| to_i32(v))),
        base_mask: Array::i32(vec![n], scene.base_mask().iter().map(|&b| i32::from(b))),
        point_instances: Array::i32(vec![n], scene.point_instances.iter().map(|&v| to_i32(v))),
        cameras,
    };
    serde_json::to_string(&doc).expect("scene serializes")
}

pub fn scene_from_json(text: &str) -> Result<SyntheticScene> {
    let doc: SceneDoc =
        serde_json::from_str(text).map_err(|e| Error::data(format!("malformed scene document: {e}")))?;
    if doc.format != SCENE_FORMAT {
        return Err(Error::data(format!("unsupported scene format '{}'", doc.format)));
    }
    let n = doc.num_points;
    doc.coords.expect_shape(&[n, 3], "coords")?;
    for (a, what) in [
        (&doc.intensity, "intensity"),
        (&doc.gt_labels, "gt_labels"),
        (&doc.base_mask, "base_mask"),
        (&doc.point_instances, "point_instances"),
    ] {
        a.expect_shape(&[n], what)?;
    }
    let coords = doc
        .coords
        .to_f64()?
        .chunks_exact(3)
        .map(|c| Vector3::new(c[0], c[1], c[2]))
        .collect();
    let gt = doc
        .gt_labels
        .to_i32()?
        .into_iter()
        .map(|v| from_i32(v, "point label"))
        .collect::<Result<Vec<_>>>()?;
    let base_mask = doc.base_mask.to_i32()?.into_iter().map(|v| v != 0).collect();
    let point_instances = doc
        .point_instances
        .to_i32()?
        .into_iter()
        .map(|v| from_i32(v, "instance"))
        .collect::<Result<Vec<_>>>()?;
    let cloud = PointCloud {
        coords,
        intensity: doc.intensity.to_f64()?,
        gt_labels: Some(gt),
        base_mask: Some(base_mask),
    };

    let mut scene = SyntheticScene {
        seed: doc.seed,
        objects: doc.objects,
        cloud,
        point_instances,
        calibrations: Vec::new(),
        images: Vec::new(),
        gt_labels: Vec::new(),
        gt_instances: Vec::new(),
        pseudo_labels: Vec::new(),
        corruption: Vec::new(),
    };
    for cam in doc.cameras {
        let (w, h) = (cam.width, cam.height);
        cam.intrinsic.expect_shape(&[3, 3], "intrinsic")?;
        cam.extrinsic.expect_shape(&[4, 4], "extrinsic")?;
        let cal = Calibration {
            intrinsic: Matrix3::from_row_slice(&cam.intrinsic.to_f64()?),
            extrinsic: Matrix4::from_row_slice(&cam.extrinsic.to_f64()?),
            width: w,
            height: h,
        };
        cal.validate()?;
        let channels = cam.features.shape.get(2).copied().unwrap_or(0);
        cam.features.expect_shape(&[h, w, channels], "features")?;
        scene.images.push(FeatureImage {
            width: w,
            height: h,
            channels,
            data: cam.features.to_f64()?,
        });
        scene.gt_labels.push(grid_from(&cam.gt_labels, w, h, "gt label image")?);
        scene.gt_instances.push(grid_from(&cam.gt_instances, w, h, "instance image")?);
        scene.pseudo_labels.push(grid_from(&cam.pseudo_labels, w, h, "pseudo-label image")?);
        scene.corruption.push(cam.corruption);
        scene.calibrations.push(cal);
    }
    Ok(scene)
}

pub fn save_scene(scene: &SyntheticScene, path: &Path) -> Result<()> {
    std::fs::write(path, scene_to_json(scene)).map_err(|e| Error::io(path, e))
}

pub fn load_scene(path: &Path) -> Result<SyntheticScene> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    scene_from_json(&text).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

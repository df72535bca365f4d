//! Camera calibration, point projection and point-pixel correspondences.

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};

use crate::alignment::{ClassId, ClassVocabulary};
use crate::error::{Error, Result};

/// Points closer to the image plane than this (meters) are never projected.
pub const DEPTH_MIN: f64 = 1e-3;

/// Pinhole intrinsics plus a rigid LiDAR→camera transform.
///
/// Camera frame convention: x right, y down, z forward.
#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub intrinsic: Matrix3<f64>,
    pub extrinsic: Matrix4<f64>,
    pub width: usize,
    pub height: usize,
}

impl Calibration {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        extrinsic: Matrix4<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let intrinsic = Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0);
        let cal = Self {
            intrinsic,
            extrinsic,
            width,
            height,
        };
        cal.validate()?;
        Ok(cal)
    }

    /// Camera at `eye` (LiDAR frame) looking at `target`, with world +z up.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let up = Vector3::z();
        let right = forward.cross(&up);
        if right.norm() < 1e-9 {
            return Err(Error::config("camera looks straight up or down"));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        // rows of R are the camera axes expressed in the LiDAR frame
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * eye);
        let mut ext = Matrix4::identity();
        ext.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ext.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self::new(
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            ext,
            width,
            height,
        )
    }

    pub fn fx(&self) -> f64 {
        self.intrinsic[(0, 0)]
    }

    pub fn fy(&self) -> f64 {
        self.intrinsic[(1, 1)]
    }

    pub fn cx(&self) -> f64 {
        self.intrinsic[(0, 2)]
    }

    pub fn cy(&self) -> f64 {
        self.intrinsic[(1, 2)]
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.extrinsic.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.extrinsic.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera center in the LiDAR frame.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.rotation();
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if ortho > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::config("extrinsic rotation block is not a proper rotation"));
        }
        let bottom = self.extrinsic.fixed_view::<1, 4>(3, 0);
        if bottom[(0, 0)] != 0.0 || bottom[(0, 1)] != 0.0 || bottom[(0, 2)] != 0.0 || bottom[(0, 3)] != 1.0
        {
            return Err(Error::config("extrinsic bottom row must be [0 0 0 1]"));
        }
        if !(self.fx() > 0.0 && self.fy() > 0.0) {
            return Err(Error::config("focal lengths must be positive"));
        }
        if !(0.0..self.width as f64).contains(&self.cx()) || !(0.0..self.height as f64).contains(&self.cy())
        {
            return Err(Error::config("principal point outside the image"));
        }
        Ok(())
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    /// Sub-pixel coordinates and depth of a camera-frame point, or `None`
    /// when the point is behind the near plane.
    pub fn project_camera(&self, pc: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        if pc.z <= DEPTH_MIN {
            return None;
        }
        let u = self.fx() * pc.x / pc.z + self.cx();
        let v = self.fy() * pc.y / pc.z + self.cy();
        Some((u, v, pc.z))
    }

    /// Integer pixel (col, row) reached by half-up rounding, if inside the frame.
    pub fn pixel_of(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        let col = (u + 0.5).floor();
        let row = (v + 0.5).floor();
        if col >= 0.0 && row >= 0.0 && col < self.width as f64 && row < self.height as f64 {
            Some((col as usize, row as usize))
        } else {
            None
        }
    }

    /// Inverse of the projection: LiDAR-frame point at `depth` along pixel (u, v).
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        let pc = Vector3::new(
            (u - self.cx()) / self.fx() * depth,
            (v - self.cy()) / self.fy() * depth,
            depth,
        );
        self.rotation().transpose() * (pc - self.translation())
    }

    /// Unit ray direction (LiDAR frame) through pixel (u, v).
    pub fn ray_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        let d = Vector3::new((u - self.cx()) / self.fx(), (v - self.cy()) / self.fy(), 1.0);
        (self.rotation().transpose() * d).normalize()
    }

    /// Same intrinsics with the extrinsic perturbed by a small rotation
    /// (axis-angle vector, radians) and translation (meters), both applied
    /// in the camera frame.
    pub fn perturbed(&self, rot: Vector3<f64>, trans: Vector3<f64>) -> Self {
        let dr = Rotation3::from_scaled_axis(rot).into_inner();
        let r = dr * self.rotation();
        let t = dr * self.translation() + trans;
        let mut ext = Matrix4::identity();
        ext.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ext.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self {
            intrinsic: self.intrinsic,
            extrinsic: ext,
            width: self.width,
            height: self.height,
        }
    }
}

/// LiDAR points with optional annotations.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub coords: Vec<Vector3<f64>>,
    /// Synthetic return intensity per point.
    pub intensity: Vec<f64>,
    pub gt_labels: Option<Vec<ClassId>>,
    pub base_mask: Option<Vec<bool>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn validate(&self, vocab: &ClassVocabulary) -> Result<()> {
        let n = self.coords.len();
        if self.intensity.len() != n {
            return Err(Error::data("intensity length differs from point count"));
        }
        if let Some(labels) = &self.gt_labels {
            if labels.len() != n {
                return Err(Error::data("label length differs from point count"));
            }
            if let Some(bad) = labels.iter().find(|&&l| l > vocab.ignore()) {
                return Err(Error::data(format!("point label {bad} outside vocabulary")));
            }
        }
        if let Some(mask) = &self.base_mask {
            if mask.len() != n {
                return Err(Error::data("base mask length differs from point count"));
            }
        }
        Ok(())
    }
}

/// Row-major grid of class ids (or any per-pixel integer tag).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelGrid {
    pub width: usize,
    pub height: usize,
    pub data: Vec<ClassId>,
}

impl LabelGrid {
    pub fn filled(width: usize, height: usize, value: ClassId) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn get(&self, col: usize, row: usize) -> ClassId {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, col: usize, row: usize, value: ClassId) {
        self.data[row * self.width + col] = value;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairEntry {
    pub point: usize,
    pub camera: usize,
    /// Sub-pixel column coordinate.
    pub u: f64,
    /// Sub-pixel row coordinate.
    pub v: f64,
    pub depth: f64,
}

impl PairEntry {
    /// Rounded (col, row) pixel; always inside the frame for entries built by
    /// [`project_points`].
    pub fn pixel(&self) -> (usize, usize) {
        ((self.u + 0.5).floor() as usize, (self.v + 0.5).floor() as usize)
    }
}

/// All (point, camera) projections that land inside an image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointPixelPairing {
    pub num_points: usize,
    pub entries: Vec<PairEntry>,
}

impl PointPixelPairing {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries restricted to the given points, re-indexed to positions in `points`.
    pub fn restrict(&self, points: &[usize]) -> PointPixelPairing {
        let mut position = vec![usize::MAX; self.num_points];
        for (i, &p) in points.iter().enumerate() {
            position[p] = i;
        }
        let mut entries: Vec<PairEntry> = self
            .entries
            .iter()
            .filter(|e| position[e.point] != usize::MAX)
            .map(|e| PairEntry {
                point: position[e.point],
                ..*e
            })
            .collect();
        entries.sort_by_key(|e| (e.point, e.camera));
        PointPixelPairing {
            num_points: points.len(),
            entries,
        }
    }
}

/// Projects every point into every camera; entries are ordered by point,
/// then camera.
pub fn project_points(cloud: &PointCloud, calibs: &[Calibration]) -> PointPixelPairing {
    let mut entries = Vec::new();
    let poses: Vec<(Matrix3<f64>, Vector3<f64>)> =
        calibs.iter().map(|c| (c.rotation(), c.translation())).collect();
    for (point, p) in cloud.coords.iter().enumerate() {
        for (camera, (cal, (r, t))) in calibs.iter().zip(&poses).enumerate() {
            let pc = r * p + t;
            let Some((u, v, depth)) = cal.project_camera(&pc) else {
                continue;
            };
            if cal.pixel_of(u, v).is_some() {
                entries.push(PairEntry {
                    point,
                    camera,
                    u,
                    v,
                    depth,
                });
            }
        }
    }
    PointPixelPairing {
        num_points: cloud.len(),
        entries,
    }
}

/// Per-point labels read from the label images at each point's pixel.
/// A point seen by several cameras takes the first non-ignore label in
/// camera order; unpaired points get the ignore sentinel.
pub fn transfer_labels(
    pairing: &PointPixelPairing,
    label_images: &[LabelGrid],
    vocab: &ClassVocabulary,
) -> Result<Vec<ClassId>> {
    let ignore = vocab.ignore();
    let mut out = vec![ignore; pairing.num_points];
    let mut best_cam = vec![usize::MAX; pairing.num_points];
    for e in &pairing.entries {
        let img = label_images.get(e.camera).ok_or_else(|| {
            Error::data(format!("no label image for camera {}", e.camera))
        })?;
        let (col, row) = e.pixel();
        if col >= img.width || row >= img.height {
            return Err(Error::data(format!(
                "label image {} is {}x{}, pixel ({col}, {row}) out of range",
                e.camera, img.width, img.height
            )));
        }
        let label = img.get(col, row);
        if label > ignore {
            return Err(Error::data(format!(
                "class id {label} outside vocabulary of {} classes",
                vocab.len()
            )));
        }
        if label != ignore && e.camera < best_cam[e.point] {
            best_cam[e.point] = e.camera;
            out[e.point] = label;
        }
    }
    Ok(out)
}

/// Pairing entries whose pixel class equals the point class, neither ignored.
pub fn matched_pairs_for_distill(
    pairing: &PointPixelPairing,
    pixel_classes: &[LabelGrid],
    point_classes: &[ClassId],
    ignore: ClassId,
) -> Vec<PairEntry> {
    pairing
        .entries
        .iter()
        .filter(|e| {
            let (col, row) = e.pixel();
            let pix = pixel_classes[e.camera].get(col, row);
            let pt = point_classes[e.point];
            pix != ignore && pix == pt
        })
        .copied()
        .collect()
}

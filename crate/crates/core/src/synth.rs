//! Seeded synthetic multi-person scenes: stick figures drawn as line
//! segments, one intensity per person, with COCO-style keypoint annotations.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::metrics::{DtInstance, GtInstance};
use crate::rng::{uniform, RngState};
use crate::tensor::Tensor;

/// One joint of a skeleton tree. `angle` is the mean direction from the
/// parent in degrees, in the image frame (0° along +x, 90° along +y, i.e.
/// downwards); the sampled direction lies within `angle ± spread`.
#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub name: &'static str,
    pub parent: Option<usize>,
    /// Limb length range `(lo, hi)` in pixels.
    pub length: (f64, f64),
    pub angle: f64,
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    pub joints: Vec<Joint>,
}

const fn joint(name: &'static str, parent: usize, length: (f64, f64), angle: f64, spread: f64) -> Joint {
    Joint {
        name,
        parent: Some(parent),
        length,
        angle,
        spread,
    }
}

const fn root(name: &'static str) -> Joint {
    Joint {
        name,
        parent: None,
        length: (0.0, 0.0),
        angle: 0.0,
        spread: 0.0,
    }
}

impl Skeleton {
    /// Pelvis, head and two feet.
    pub fn mini() -> Self {
        Self {
            joints: vec![
                root("pelvis"),
                joint("head", 0, (7.0, 10.0), -90.0, 15.0),
                joint("left_foot", 0, (7.0, 10.0), 120.0, 15.0),
                joint("right_foot", 0, (7.0, 10.0), 60.0, 15.0),
            ],
        }
    }

    /// The 17 COCO keypoints in COCO order, rooted at the nose.
    pub fn coco17() -> Self {
        Self {
            joints: vec![
                root("nose"),
                joint("left_eye", 0, (2.0, 3.0), -60.0, 15.0),
                joint("right_eye", 0, (2.0, 3.0), -120.0, 15.0),
                joint("left_ear", 1, (2.0, 3.0), 0.0, 15.0),
                joint("right_ear", 2, (2.0, 3.0), 180.0, 15.0),
                joint("left_shoulder", 0, (6.0, 8.0), 60.0, 15.0),
                joint("right_shoulder", 0, (6.0, 8.0), 120.0, 15.0),
                joint("left_elbow", 5, (6.0, 8.0), 80.0, 30.0),
                joint("right_elbow", 6, (6.0, 8.0), 100.0, 30.0),
                joint("left_wrist", 7, (5.0, 7.0), 90.0, 30.0),
                joint("right_wrist", 8, (5.0, 7.0), 90.0, 30.0),
                joint("left_hip", 5, (10.0, 13.0), 95.0, 10.0),
                joint("right_hip", 6, (10.0, 13.0), 85.0, 10.0),
                joint("left_knee", 11, (8.0, 10.0), 90.0, 15.0),
                joint("right_knee", 12, (8.0, 10.0), 90.0, 15.0),
                joint("left_ankle", 13, (8.0, 10.0), 90.0, 15.0),
                joint("right_ankle", 14, (8.0, 10.0), 90.0, 15.0),
            ],
        }
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    /// Exactly one root at index 0, parents precede children, limb lengths
    /// positive.
    pub fn validate(&self) -> Result<()> {
        let bad = |m| Err(Error::InvalidConfig(m));
        match self.joints.first() {
            Some(j) if j.parent.is_none() => {}
            _ => return bad("skeleton must start with its root joint".into()),
        }
        for (i, j) in self.joints.iter().enumerate().skip(1) {
            match j.parent {
                Some(p) if p < i => {}
                _ => return bad(format!("joint {} must have an earlier parent", j.name)),
            }
            if !(j.length.0 > 0.0 && j.length.0 <= j.length.1 && j.length.1.is_finite()) {
                return bad(format!("joint {} has an invalid length range", j.name));
            }
            if !(j.spread >= 0.0 && j.angle.is_finite() && j.spread.is_finite()) {
                return bad(format!("joint {} has an invalid angle range", j.name));
            }
        }
        Ok(())
    }
}

/// Parameters of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: RngState,
    pub image_id: u64,
    pub n_persons: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub skeleton: Skeleton,
    pub overlap_allowed: bool,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::InvalidConfig("scene size and channels must be positive".into()));
        }
        self.skeleton.validate()
    }
}

/// Sampled parameters of one person, kept so annotations can be recomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonSample {
    pub root: (f64, f64),
    /// Per joint; zero for the root.
    pub lengths: Vec<f64>,
    /// Per joint, radians; zero for the root.
    pub angles: Vec<f64>,
    pub intensity: f64,
}

impl PersonSample {
    /// Joint positions in pixels, before visibility is applied.
    pub fn joint_positions(&self, skeleton: &Skeleton) -> Vec<(f64, f64)> {
        let mut pos: Vec<(f64, f64)> = Vec::with_capacity(skeleton.len());
        for (i, j) in skeleton.joints.iter().enumerate() {
            pos.push(match j.parent {
                None => self.root,
                Some(p) => {
                    let (px, py) = pos[p];
                    (
                        px + self.lengths[i] * libm::cos(self.angles[i]),
                        py + self.lengths[i] * libm::sin(self.angles[i]),
                    )
                }
            });
        }
        pos
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image_id: u64,
    /// `height × width × channels`, background zero.
    pub image: Tensor,
    /// Keypoints in pixels; out-of-frame joints are `(0, 0, 0)`.
    pub gts: Vec<GtInstance>,
    pub persons: Vec<PersonSample>,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    /// Ground truths mirrored as detections with score 1.
    pub fn perfect_detections(&self) -> Vec<DtInstance> {
        self.gts
            .iter()
            .map(|g| DtInstance {
                image_id: g.image_id,
                keypoints: g.keypoints.clone(),
                score: 1.0,
            })
            .collect()
    }
}

fn in_frame(x: f64, y: f64, width: usize, height: usize) -> bool {
    x >= 0.0 && y >= 0.0 && x <= (width - 1) as f64 && y <= (height - 1) as f64
}

/// Bounding box `(x0, y0, x1, y1)` of a point set.
fn bounds(points: &[(f64, f64)]) -> (f64, f64, f64, f64) {
    points.iter().fold(
        (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        |(a, b, c, d), &(x, y)| (a.min(x), b.min(y), c.max(x), d.max(y)),
    )
}

const PLACEMENT_ATTEMPTS: usize = 100;

/// Draws a scene. Each person's pose is sampled relative to its root, then
/// the root is placed so the whole figure stays in frame when the figure
/// fits. Without `overlap_allowed`, figures whose one-pixel-padded boxes
/// would intersect an earlier figure are resampled, and a person that
/// cannot be placed after a fixed number of attempts is dropped.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let sk = &spec.skeleton;
    let mut rng = spec.seed.stream(1);
    let mut persons: Vec<PersonSample> = Vec::new();
    let mut boxes: Vec<(f64, f64, f64, f64)> = Vec::new();

    for i in 0..spec.n_persons {
        let intensity = 1.0 - 0.5 * i as f64 / spec.n_persons as f64;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let mut lengths = vec![0.0; sk.len()];
            let mut angles = vec![0.0; sk.len()];
            for (j, joint) in sk.joints.iter().enumerate().skip(1) {
                lengths[j] = uniform(&mut rng, joint.length.0, joint.length.1);
                let deg = joint.angle + uniform(&mut rng, -joint.spread, joint.spread);
                angles[j] = deg * core::f64::consts::PI / 180.0;
            }
            let mut person = PersonSample {
                root: (0.0, 0.0),
                lengths,
                angles,
                intensity,
            };
            let (x0, y0, x1, y1) = bounds(&person.joint_positions(sk));
            let place = |rng: &mut _, lo: f64, hi: f64, size: usize| {
                let (a, b) = (-lo, (size - 1) as f64 - hi);
                if a <= b {
                    uniform(rng, a, b)
                } else {
                    uniform(rng, 0.0, (size - 1) as f64)
                }
            };
            let rx = place(&mut rng, x0, x1, w);
            let ry = place(&mut rng, y0, y1, h);
            person.root = (rx, ry);
            let bx = (x0 + rx - 1.0, y0 + ry - 1.0, x1 + rx + 1.0, y1 + ry + 1.0);
            let clash = boxes
                .iter()
                .any(|b| bx.0 <= b.2 && b.0 <= bx.2 && bx.1 <= b.3 && b.1 <= bx.3);
            if spec.overlap_allowed || !clash {
                boxes.push(bx);
                persons.push(person);
                break;
            }
        }
    }

    let mut image = Tensor::zeros(&[h, w, c]);
    let mut gts = Vec::with_capacity(persons.len());
    for person in &persons {
        let pos = person.joint_positions(sk);
        for (j, joint) in sk.joints.iter().enumerate() {
            if let Some(p) = joint.parent {
                draw_segment(&mut image, pos[p], pos[j], person.intensity);
            }
        }
        let keypoints: Vec<[f64; 3]> = pos
            .iter()
            .map(|&(x, y)| if in_frame(x, y, w, h) { [x, y, 2.0] } else { [0.0, 0.0, 0.0] })
            .collect();
        let visible: Vec<(f64, f64)> = keypoints.iter().filter(|k| k[2] > 0.0).map(|k| (k[0], k[1])).collect();
        let area = if visible.is_empty() {
            0.0
        } else {
            // each side floored at one pixel so clipped people keep a positive area
            let (x0, y0, x1, y1) = bounds(&visible);
            (x1 - x0).max(1.0) * (y1 - y0).max(1.0)
        };
        gts.push(GtInstance {
            image_id: spec.image_id,
            keypoints,
            area,
            iscrowd: false,
        });
    }
    Ok(Scene {
        image_id: spec.image_id,
        image,
        gts,
        persons,
    })
}

/// Rasterises a segment by dense sampling, keeping the brighter value where
/// strokes cross.
fn draw_segment(image: &mut Tensor, a: (f64, f64), b: (f64, f64), intensity: f64) {
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let len = libm::sqrt((b.0 - a.0) * (b.0 - a.0) + (b.1 - a.1) * (b.1 - a.1));
    let steps = libm::ceil(len * 4.0).max(1.0) as usize;
    let data = image.data_mut();
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = libm::round(a.0 + t * (b.0 - a.0));
        let y = libm::round(a.1 + t * (b.1 - a.1));
        if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
            continue;
        }
        let base = (y as usize * w + x as usize) * c;
        for v in &mut data[base..base + c] {
            *v = v.max(intensity);
        }
    }
}

/// A list of scenes sharing size and skeleton.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub seed: u64,
    pub scenes: usize,
    pub min_persons: usize,
    pub max_persons: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub skeleton: Skeleton,
    pub overlap_allowed: bool,
}

impl DatasetSpec {
    /// 32×32 single-channel mini-skeleton scenes with one to three people.
    pub fn toy(seed: u64, scenes: usize) -> Self {
        Self {
            seed,
            scenes,
            min_persons: 1,
            max_persons: 3,
            height: 32,
            width: 32,
            channels: 1,
            skeleton: Skeleton::mini(),
            overlap_allowed: false,
        }
    }

    /// Scene `i` (image id `i + 1`): person count and content derive from
    /// the dataset seed split by `i`.
    pub fn scene_spec(&self, i: usize) -> SceneSpec {
        let seed = RngState::new(self.seed).split(i as u64);
        let n_persons = if self.max_persons <= self.min_persons {
            self.min_persons
        } else {
            seed.stream(0).gen_range(self.min_persons..=self.max_persons)
        };
        SceneSpec {
            seed,
            image_id: i as u64 + 1,
            n_persons,
            height: self.height,
            width: self.width,
            channels: self.channels,
            skeleton: self.skeleton.clone(),
            overlap_allowed: self.overlap_allowed,
        }
    }
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<Scene>> {
    (0..spec.scenes).map(|i| generate_scene(&spec.scene_spec(i))).collect()
}

//! Datasets: COCO-JSON annotations, a synthetic shapes generator and image
//! tensor conversion.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, LabeledBox};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
}

/// Annotation with a canonical `xyxy` box and a dense class index.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub class_id: usize,
    pub bbox: BBox,
}

/// Validated annotation index. Class ids are positions in `categories`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    pub images: Vec<ImageInfo>,
    pub annotations: Vec<Annotation>,
    pub categories: Vec<Category>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxPolicy {
    #[default]
    Reject,
    Clip,
}

#[derive(Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default)]
    area: f64,
    #[serde(default)]
    iscrowd: u8,
}

#[derive(Serialize, Deserialize)]
struct CocoFile {
    images: Vec<ImageInfo>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<Category>,
}

impl DatasetIndex {
    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    /// Boxes of every image keyed by image id.
    pub fn boxes_by_image(&self) -> BTreeMap<u64, Vec<LabeledBox>> {
        let mut map: BTreeMap<u64, Vec<LabeledBox>> = self.images.iter().map(|i| (i.id, Vec::new())).collect();
        for a in &self.annotations {
            map.entry(a.image_id).or_default().push(LabeledBox::new(a.bbox, a.class_id));
        }
        map
    }

    pub fn ground_truth(&self) -> Vec<crate::metrics::GroundTruthBox> {
        self.annotations
            .iter()
            .map(|a| crate::metrics::GroundTruthBox { image_id: a.image_id, bbox: a.bbox, class_id: a.class_id })
            .collect()
    }

    pub fn from_json(text: &str, policy: BoxPolicy) -> Result<Self> {
        let raw: CocoFile = serde_json::from_str(text)?;
        let mut categories = raw.categories;
        categories.sort_by_key(|c| c.id);
        let class_of: BTreeMap<u64, usize> = categories.iter().enumerate().map(|(i, c)| (c.id, i)).collect();
        if class_of.len() != categories.len() {
            return Err(Error::Dataset("duplicate category id".into()));
        }
        let sizes: BTreeMap<u64, (u32, u32)> = raw.images.iter().map(|i| (i.id, (i.width, i.height))).collect();
        if sizes.len() != raw.images.len() {
            return Err(Error::Dataset("duplicate image id".into()));
        }
        let mut annotations = Vec::with_capacity(raw.annotations.len());
        for a in raw.annotations {
            let &(w, h) = sizes
                .get(&a.image_id)
                .ok_or_else(|| Error::Dataset(format!("annotation {} references unknown image_id {}", a.id, a.image_id)))?;
            let class_id = *class_of
                .get(&a.category_id)
                .ok_or_else(|| Error::Dataset(format!("annotation {} references unknown category_id {}", a.id, a.category_id)))?;
            let [x, y, bw, bh] = a.bbox;
            let mut bbox = BBox::from_xywh(x, y, bw, bh);
            let inside = bbox.x1 >= 0.0 && bbox.y1 >= 0.0 && bbox.x2 <= w as f64 && bbox.y2 <= h as f64;
            if !inside {
                match policy {
                    BoxPolicy::Reject => {
                        return Err(Error::Dataset(format!(
                            "annotation {} box {:?} outside image {} ({w}x{h})",
                            a.id, a.bbox, a.image_id
                        )))
                    }
                    BoxPolicy::Clip => bbox = bbox.clip(w as f64, h as f64),
                }
            }
            if !(bbox.area() > 0.0) {
                return Err(Error::Dataset(format!("annotation {} has non-positive area", a.id)));
            }
            annotations.push(Annotation { id: a.id, image_id: a.image_id, class_id, bbox });
        }
        Ok(DatasetIndex { images: raw.images, annotations, categories })
    }

    pub fn to_json(&self) -> String {
        let file = CocoFile {
            images: self.images.clone(),
            annotations: self
                .annotations
                .iter()
                .map(|a| {
                    let [x, y, w, h] = a.bbox.to_xywh();
                    CocoAnnotation {
                        id: a.id,
                        image_id: a.image_id,
                        category_id: self.categories[a.class_id].id,
                        bbox: [x, y, w, h],
                        area: a.bbox.area(),
                        iscrowd: 0,
                    }
                })
                .collect(),
            categories: self.categories.clone(),
        };
        serde_json::to_string_pretty(&file).expect("COCO index serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

pub fn load_coco_json(path: &Path, policy: BoxPolicy) -> Result<DatasetIndex> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DatasetIndex::from_json(&text, policy)
}

pub const SHAPE_NAMES: [&str; 3] = ["rectangle", "circle", "triangle"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_images: usize,
    pub image_size: u32,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Shape side range as fractions of the image size.
    pub min_extent: f64,
    pub max_extent: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { num_images: 50, image_size: 256, min_shapes: 1, max_shapes: 3, min_extent: 0.2, max_extent: 0.5, seed: 7 }
    }
}

/// One image's worth of shapes, before rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeLayout {
    pub background: [u8; 3],
    pub shapes: Vec<(LabeledBox, [u8; 3])>,
}

const MAX_PLACEMENT_TRIES: usize = 50;
const MAX_LAYOUT_OVERLAP: f64 = 0.3;

/// Random layouts for every image; rendering consumes a separate stream so
/// the layouts alone can be inspected cheaply.
pub fn sample_layouts(spec: &SynthSpec) -> Vec<ShapeLayout> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = spec.image_size as f64;
    (0..spec.num_images)
        .map(|_| {
            let background = [rng.gen_range(0..80), rng.gen_range(0..80), rng.gen_range(0..80)];
            let count = rng.gen_range(spec.min_shapes..=spec.max_shapes);
            let mut shapes: Vec<(LabeledBox, [u8; 3])> = Vec::new();
            for _ in 0..count {
                let class_id = rng.gen_range(0..SHAPE_NAMES.len());
                let color = [rng.gen_range(120..=255), rng.gen_range(120..=255), rng.gen_range(120..=255)];
                for _ in 0..MAX_PLACEMENT_TRIES {
                    let w = (rng.gen_range(spec.min_extent..=spec.max_extent) * size).round();
                    let h = if class_id == 1 { w } else { (rng.gen_range(spec.min_extent..=spec.max_extent) * size).round() };
                    let x = rng.gen_range(0.0..=(size - w)).round();
                    let y = rng.gen_range(0.0..=(size - h)).round();
                    let bbox = BBox::new(x, y, x + w, y + h);
                    if shapes.iter().all(|(s, _)| iou(&s.bbox, &bbox) < MAX_LAYOUT_OVERLAP) {
                        shapes.push((LabeledBox::new(bbox, class_id), color));
                        break;
                    }
                }
            }
            ShapeLayout { background, shapes }
        })
        .collect()
}

fn inside_shape(class_id: usize, b: &BBox, px: f64, py: f64) -> bool {
    match class_id {
        0 => true,
        1 => {
            let (cx, cy) = b.center();
            let (rx, ry) = (b.width() / 2.0, b.height() / 2.0);
            let (dx, dy) = ((px - cx) / rx, (py - cy) / ry);
            dx * dx + dy * dy <= 1.0
        }
        _ => {
            // apex at top centre, base along the bottom edge
            let t = (py - b.y1) / b.height();
            let half = t * b.width() / 2.0;
            let cx = (b.x1 + b.x2) / 2.0;
            (px - cx).abs() <= half
        }
    }
}

/// Renders a layout onto a noisy background.
pub fn render_layout(layout: &ShapeLayout, size: u32, rng: &mut ChaCha8Rng) -> RgbImage {
    let mut img = RgbImage::new(size, size);
    for p in img.pixels_mut() {
        let n: i16 = rng.gen_range(-20..=20);
        *p = Rgb(layout.background.map(|c| (c as i16 + n).clamp(0, 255) as u8));
    }
    for (lb, color) in &layout.shapes {
        let b = lb.bbox;
        for y in b.y1 as u32..b.y2 as u32 {
            for x in b.x1 as u32..b.x2 as u32 {
                if inside_shape(lb.class_id, &b, x as f64 + 0.5, y as f64 + 0.5) {
                    img.put_pixel(x, y, Rgb(*color));
                }
            }
        }
    }
    img
}

/// Images and boxes generated in memory.
pub fn render_synthetic(spec: &SynthSpec) -> (DatasetIndex, Vec<RgbImage>) {
    let layouts = sample_layouts(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut images = Vec::with_capacity(layouts.len());
    let mut infos = Vec::with_capacity(layouts.len());
    let mut annotations = Vec::new();
    for (i, layout) in layouts.iter().enumerate() {
        let id = i as u64 + 1;
        images.push(render_layout(layout, spec.image_size, &mut rng));
        infos.push(ImageInfo { id, file_name: format!("{id:06}.png"), width: spec.image_size, height: spec.image_size });
        for (lb, _) in &layout.shapes {
            annotations.push(Annotation { id: annotations.len() as u64 + 1, image_id: id, class_id: lb.class_id, bbox: lb.bbox });
        }
    }
    let categories = SHAPE_NAMES.iter().enumerate().map(|(i, n)| Category { id: i as u64 + 1, name: n.to_string() }).collect();
    (DatasetIndex { images: infos, annotations, categories }, images)
}

pub const ANNOTATION_FILE: &str = "annotations.json";

/// Writes PNG images and `annotations.json` into `out_dir`.
pub fn generate_synthetic(spec: &SynthSpec, out_dir: &Path) -> Result<DatasetIndex> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (index, images) = render_synthetic(spec);
    for (info, img) in index.images.iter().zip(&images) {
        let path = out_dir.join(&info.file_name);
        img.save_with_format(&path, image::ImageFormat::Png)?;
    }
    index.save(&out_dir.join(ANNOTATION_FILE))?;
    Ok(index)
}

/// A loaded dataset: index plus decoded RGB images, in index order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub index: DatasetIndex,
    pub images: Vec<RgbImage>,
}

impl Dataset {
    pub fn in_memory(index: DatasetIndex, images: Vec<RgbImage>) -> Self {
        Dataset { index, images }
    }

    /// Loads `annotations.json` (or the given file) and its images.
    pub fn load(path: &Path, policy: BoxPolicy) -> Result<Self> {
        let (json, root): (PathBuf, PathBuf) = if path.is_dir() {
            (path.join(ANNOTATION_FILE), path.to_path_buf())
        } else {
            (path.to_path_buf(), path.parent().unwrap_or(Path::new(".")).to_path_buf())
        };
        let index = load_coco_json(&json, policy)?;
        let mut images = Vec::with_capacity(index.images.len());
        for info in &index.images {
            let p = root.join(&info.file_name);
            let img = image::open(&p).map_err(|e| Error::Dataset(format!("{}: {e}", p.display())))?.to_rgb8();
            if img.width() != info.width || img.height() != info.height {
                return Err(Error::Dataset(format!(
                    "{} is {}x{} but the index says {}x{}",
                    p.display(),
                    img.width(),
                    img.height(),
                    info.width,
                    info.height
                )));
            }
            images.push(img);
        }
        Ok(Dataset { index, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn boxes(&self) -> Vec<Vec<LabeledBox>> {
        let map = self.index.boxes_by_image();
        self.index.images.iter().map(|i| map[&i.id].clone()).collect()
    }

    pub fn class_ids(&self) -> BTreeSet<usize> {
        self.index.annotations.iter().map(|a| a.class_id).collect()
    }
}

pub const PIXEL_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const PIXEL_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Stacks equally-sized images into a normalized `[n, 3, h, w]` tensor.
pub fn images_to_tensor(images: &[&RgbImage]) -> Tensor {
    let (w, h) = images[0].dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut t = Tensor::zeros([images.len(), 3, h, w]);
    for (s, img) in images.iter().enumerate() {
        assert_eq!(img.dimensions(), (w as u32, h as u32), "batch images must share a size");
        let dst = t.sample_mut(s);
        for (i, p) in img.pixels().enumerate() {
            for c in 0..3 {
                dst[c * h * w + i] = (p[c] as f32 / 255.0 - PIXEL_MEAN[c]) / PIXEL_STD[c];
            }
        }
    }
    t
}

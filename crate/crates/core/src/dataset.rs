//! Posed image datasets: in-memory representation, the on-disk directory
//! layout, train/test splitting and key-frame selection.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! camera.json   {width, height, fx, fy, cx, cy, num_classes, class_names[]}
//! frames.json   [{rgb, label, instance?, depth?, pose: [16 numbers, row-major c2w]}]
//! rgb/*.png     8-bit RGB
//! label/*.png   8-bit grayscale class ids, 255 = void
//! instance/*.png  8-bit grayscale instance ids (optional)
//! depth/*.pfm   32-bit float ray distance in metres, little-endian (optional)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, Pose};

/// Label value marking an unlabelled pixel.
pub const VOID: u8 = 255;

/// Row-major image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    pub width: u32,
    pub height: u32,
    pub data: Vec<T>,
}

impl<T: Clone> Image<T> {
    pub fn filled(width: u32, height: u32, value: T) -> Self {
        Image { width, height, data: vec![value; width as usize * height as usize] }
    }
}

impl<T> Image<T> {
    pub fn from_vec(width: u32, height: u32, data: Vec<T>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::domain(format!(
                "image buffer of {} elements does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Image { width, height, data })
    }

    pub fn index(&self, col: u32, row: u32) -> usize {
        row as usize * self.width as usize + col as usize
    }

    pub fn get(&self, col: u32, row: u32) -> &T {
        &self.data[self.index(col, row)]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_size<U>(&self, other: &Image<U>) -> bool {
        self.width == other.width && self.height == other.height
    }
}

pub type LabelMap = Image<u8>;
pub type RgbImage = Image<[u8; 3]>;
pub type DepthMap = Image<f32>;

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub rgb: RgbImage,
    pub labels: LabelMap,
    pub instances: Option<LabelMap>,
    pub depth: Option<DepthMap>,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub camera: Camera,
    pub class_names: Vec<String>,
    pub frames: Vec<Frame>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn has_depth(&self) -> bool {
        !self.frames.is_empty() && self.frames.iter().all(|f| f.depth.is_some())
    }

    pub fn has_instances(&self) -> bool {
        !self.frames.is_empty() && self.frames.iter().all(|f| f.instances.is_some())
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.frames.iter().map(|f| f.pose).collect()
    }

    /// Checks every structural invariant; `path` only labels the error.
    pub fn validate(&self, path: &Path) -> Result<()> {
        self.camera.validate().map_err(|e| Error::load(path, e.to_string()))?;
        let c = self.num_classes();
        if c < 1 || c > VOID as usize {
            return Err(Error::load(path, format!("num_classes {c} outside 1..=255")));
        }
        let (w, h) = (self.camera.width, self.camera.height);
        for (i, f) in self.frames.iter().enumerate() {
            let dims_ok = f.rgb.width == w
                && f.rgb.height == h
                && f.labels.width == w
                && f.labels.height == h
                && f.instances.as_ref().is_none_or(|m| m.width == w && m.height == h)
                && f.depth.as_ref().is_none_or(|m| m.width == w && m.height == h);
            if !dims_ok {
                return Err(Error::load(path, format!("frame {i}: image size differs from camera {w}x{h}")));
            }
            if let Some(p) = f.labels.data.iter().position(|&l| l != VOID && l as usize >= c) {
                return Err(Error::load(
                    path,
                    format!(
                        "frame {i}: label {} at pixel ({}, {}) is not below num_classes {c}",
                        f.labels.data[p],
                        p % w as usize,
                        p / w as usize
                    ),
                ));
            }
            f.pose.validate().map_err(|e| Error::load(path, format!("frame {i}: {e}")))?;
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["rgb", "label", "instance", "depth"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let header = CameraFile {
            width: self.camera.width,
            height: self.camera.height,
            fx: self.camera.fx,
            fy: self.camera.fy,
            cx: self.camera.cx,
            cy: self.camera.cy,
            num_classes: self.num_classes(),
            class_names: self.class_names.clone(),
        };
        write_json(&dir.join("camera.json"), &header)?;

        let mut entries = Vec::with_capacity(self.frames.len());
        for (i, f) in self.frames.iter().enumerate() {
            let rgb = format!("rgb/{i:05}.png");
            let label = format!("label/{i:05}.png");
            save_rgb_png(&dir.join(&rgb), &f.rgb)?;
            save_gray_png(&dir.join(&label), &f.labels)?;
            let instance = match &f.instances {
                Some(m) => {
                    let name = format!("instance/{i:05}.png");
                    save_gray_png(&dir.join(&name), m)?;
                    Some(name)
                }
                None => None,
            };
            let depth = match &f.depth {
                Some(d) => {
                    let name = format!("depth/{i:05}.pfm");
                    save_pfm(&dir.join(&name), d)?;
                    Some(name)
                }
                None => None,
            };
            entries.push(FrameEntry { rgb, label, instance, depth, pose: f.pose.to_matrix().to_vec() });
        }
        write_json(&dir.join("frames.json"), &entries)
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let header: CameraFile = read_json(&dir.join("camera.json"))?;
        if header.class_names.len() != header.num_classes {
            return Err(Error::load(
                dir.join("camera.json"),
                format!(
                    "num_classes {} disagrees with {} class names",
                    header.num_classes,
                    header.class_names.len()
                ),
            ));
        }
        let camera = Camera {
            width: header.width,
            height: header.height,
            fx: header.fx,
            fy: header.fy,
            cx: header.cx,
            cy: header.cy,
        };
        let frames_path = dir.join("frames.json");
        let entries: Vec<FrameEntry> = read_json(&frames_path)?;
        let mut frames = Vec::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            let pose_arr: [f64; 16] = e.pose.as_slice().try_into().map_err(|_| {
                Error::load(&frames_path, format!("frame {i}: pose needs 16 numbers, got {}", e.pose.len()))
            })?;
            let pose = Pose::from_matrix(&pose_arr)
                .map_err(|err| Error::load(&frames_path, format!("frame {i}: {err}")))?;
            frames.push(Frame {
                rgb: load_rgb_png(&dir.join(&e.rgb))?,
                labels: load_gray_png(&dir.join(&e.label))?,
                instances: e.instance.as_ref().map(|p| load_gray_png(&dir.join(p))).transpose()?,
                depth: e.depth.as_ref().map(|p| load_pfm(&dir.join(p))).transpose()?,
                pose,
            });
        }
        let ds = Dataset { camera, class_names: header.class_names, frames };
        ds.validate(dir)?;
        Ok(ds)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CameraFile {
    width: u32,
    height: u32,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    num_classes: usize,
    class_names: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameEntry {
    rgb: String,
    label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    instance: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depth: Option<String>,
    pose: Vec<f64>,
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::load(path, format!("serialize: {e}")))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::load(path, format!("cannot read: {e}")))?;
    serde_json::from_str(&text).map_err(|e| Error::load(path, format!("malformed json: {e}")))
}

pub fn save_rgb_png(path: &Path, img: &RgbImage) -> Result<()> {
    let raw: Vec<u8> = img.data.iter().flatten().copied().collect();
    image::save_buffer(path, &raw, img.width, img.height, image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::load(path, format!("png encode: {e}")))
}

pub fn save_gray_png(path: &Path, img: &LabelMap) -> Result<()> {
    image::save_buffer(path, &img.data, img.width, img.height, image::ExtendedColorType::L8)
        .map_err(|e| Error::load(path, format!("png encode: {e}")))
}

fn open_png(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::load(path, "missing file"));
    }
    image::open(path).map_err(|e| Error::load(path, format!("png decode: {e}")))
}

pub fn load_rgb_png(path: &Path) -> Result<RgbImage> {
    let img = open_png(path)?;
    if img.color() != image::ColorType::Rgb8 {
        return Err(Error::load(path, format!("expected 8-bit RGB, found {:?}", img.color())));
    }
    let rgb = img.into_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.pixels().map(|p| p.0).collect();
    Image::from_vec(w, h, data)
}

pub fn load_gray_png(path: &Path) -> Result<LabelMap> {
    let img = open_png(path)?;
    if img.color() != image::ColorType::L8 {
        return Err(Error::load(path, format!("expected 8-bit grayscale, found {:?}", img.color())));
    }
    let gray = img.into_luma8();
    let (w, h) = gray.dimensions();
    Image::from_vec(w, h, gray.into_raw())
}

/// Single-channel PFM, little-endian, bottom row first.
pub fn save_pfm(path: &Path, img: &DepthMap) -> Result<()> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    for row in (0..img.height).rev() {
        for col in 0..img.width {
            out.extend_from_slice(&img.get(col, row).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn load_pfm(path: &Path) -> Result<DepthMap> {
    let bytes = fs::read(path).map_err(|e| Error::load(path, format!("cannot read: {e}")))?;
    // Header: three whitespace-terminated tokens after the magic line.
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::load(path, "truncated PFM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1; // single whitespace byte ends the header
    if fields[0] != "Pf" {
        return Err(Error::load(path, format!("expected grayscale PFM magic 'Pf', found '{}'", fields[0])));
    }
    let parse_dim = |s: &str| s.parse::<u32>().map_err(|_| Error::load(path, format!("bad PFM dimension '{s}'")));
    let (w, h) = (parse_dim(&fields[1])?, parse_dim(&fields[2])?);
    let scale: f64 = fields[3].parse().map_err(|_| Error::load(path, "bad PFM scale"))?;
    if scale >= 0.0 {
        return Err(Error::load(path, "big-endian PFM is not supported"));
    }
    let n = w as usize * h as usize;
    let body = bytes.get(pos..pos + 4 * n).ok_or_else(|| Error::load(path, "truncated PFM body"))?;
    let mut data = vec![0f32; n];
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let (row_from_bottom, col) = (i / w as usize, i % w as usize);
        let row = h as usize - 1 - row_from_bottom;
        data[row * w as usize + col] = f32::from_le_bytes(chunk.try_into().unwrap());
    }
    Image::from_vec(w, h, data)
}

/// Frame indices for training and testing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Every `stride`-th frame trains; the test set is the midpoint between each
/// pair of consecutive training frames.
pub fn split(num_frames: usize, stride: usize) -> Result<Split> {
    if stride == 0 {
        return Err(Error::domain("split stride must be at least 1"));
    }
    if num_frames == 0 {
        return Ok(Split { train: vec![], test: vec![] });
    }
    let train: Vec<usize> = (0..num_frames).step_by(stride).collect();
    let test = train
        .windows(2)
        .map(|w| (w[0] + w[1]) / 2)
        .filter(|m| m % stride != 0)
        .collect();
    Ok(Split { train, test })
}

/// Which frames contribute semantic supervision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupervisionMask {
    pub labelled: Vec<bool>,
}

impl SupervisionMask {
    pub fn all(num_frames: usize) -> Self {
        SupervisionMask { labelled: vec![true; num_frames] }
    }

    /// Explicit key-frame list, e.g. hand-picked frames covering the scene.
    pub fn from_indices(num_frames: usize, indices: &[usize]) -> Result<Self> {
        let mut labelled = vec![false; num_frames];
        for &i in indices {
            *labelled
                .get_mut(i)
                .ok_or_else(|| Error::domain(format!("key-frame {i} outside {num_frames} frames")))? = true;
        }
        Ok(SupervisionMask { labelled })
    }

    pub fn indices(&self) -> Vec<usize> {
        self.labelled.iter().enumerate().filter(|(_, &l)| l).map(|(i, _)| i).collect()
    }

    pub fn is_labelled(&self, frame: usize) -> bool {
        self.labelled.get(frame).copied().unwrap_or(false)
    }
}

/// Keep `ceil((1 - ratio) * N)` of the training frames, evenly spaced over
/// the ordered list with the first frame pinned.
pub fn select_keyframes(train: &[usize], sparsity_ratio: f64) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&sparsity_ratio) {
        return Err(Error::domain(format!("sparsity ratio {sparsity_ratio} outside [0, 1)")));
    }
    if train.is_empty() {
        return Err(Error::domain("no training frames to select from"));
    }
    let n = train.len();
    // The epsilon absorbs representation error such as (1 - 0.9) * 180 = 18.000000000000004.
    let keep = (((1.0 - sparsity_ratio) * n as f64) - 1e-9).ceil().max(1.0) as usize;
    let keep = keep.min(n);
    if keep == 1 {
        return Ok(vec![train[0]]);
    }
    let step = (n - 1) as f64 / (keep - 1) as f64;
    let mut picked: Vec<usize> = (0..keep).map(|i| train[(i as f64 * step).round() as usize]).collect();
    picked.dedup();
    Ok(picked)
}

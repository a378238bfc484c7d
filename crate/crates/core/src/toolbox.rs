//! Image tools and box geometry.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use image::{imageops, RgbImage};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::protocol::{ToolCall, ROTATE_TOOL, ZOOM_TOOL};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ToolError {
    #[error("unknown tool '{0}'")]
    UnknownTool(String),
    #[error("empty region")]
    DegenerateBox,
    #[error("unsupported rotation angle {0}")]
    UnsupportedAngle(i64),
    #[error("bad arguments: {0}")]
    BadArguments(String),
}

#[derive(Debug, Error)]
pub enum ImageLoadError {
    #[error("cannot read image {path}: {source}")]
    Decode {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("image {0} has zero width or height")]
    Empty(String),
}

/// Axis-aligned box in original-image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_finite(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
    }

    pub fn to_array(self) -> [f64; 4] {
        self.into()
    }
}

pub const DEFAULT_MIN_SIDE: f64 = 10.0;

/// Grows `[lo, hi]` symmetrically to at least `min_side`, then shifts it back
/// inside `[0, limit]`.
fn expand_side(lo: f64, hi: f64, min_side: f64, limit: f64) -> (f64, f64) {
    let side = hi - lo;
    if side >= min_side {
        return (lo, hi);
    }
    if min_side >= limit {
        return (0.0, limit);
    }
    let pad = (min_side - side) / 2.0;
    let (mut lo, mut hi) = (lo - pad, hi + pad);
    if lo < 0.0 {
        hi -= lo;
        lo = 0.0;
    }
    if hi > limit {
        lo -= hi - limit;
        hi = limit;
    }
    (lo.max(0.0), hi)
}

/// Reorders corners, clamps to the image, and widens sides shorter than
/// `min_side`. Fails if nothing of the box lies inside the image.
pub fn normalize_and_clamp(b: BBox, width: u32, height: u32, min_side: f64) -> Result<BBox, ToolError> {
    if !b.is_finite() {
        return Err(ToolError::DegenerateBox);
    }
    let (w, h) = (width as f64, height as f64);
    let (x1, x2) = (b.x1.min(b.x2).clamp(0.0, w), b.x1.max(b.x2).clamp(0.0, w));
    let (y1, y2) = (b.y1.min(b.y2).clamp(0.0, h), b.y1.max(b.y2).clamp(0.0, h));
    if x2 - x1 <= 0.0 || y2 - y1 <= 0.0 {
        return Err(ToolError::DegenerateBox);
    }
    let (x1, x2) = expand_side(x1, x2, min_side, w);
    let (y1, y2) = expand_side(y1, y2, min_side, h);
    Ok(BBox::new(x1, y1, x2, y2))
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// An RGB raster with a stable identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    pub id: String,
    pub pixels: Arc<RgbImage>,
}

impl RasterImage {
    /// Returns `None` for a zero-sized buffer.
    pub fn new(id: impl Into<String>, pixels: RgbImage) -> Option<Self> {
        if pixels.width() == 0 || pixels.height() == 0 {
            return None;
        }
        Some(Self {
            id: id.into(),
            pixels: Arc::new(pixels),
        })
    }

    /// Solid-colour image, mostly for tests and synthetic data.
    pub fn filled(id: impl Into<String>, width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let buf = RgbImage::from_pixel(width.max(1), height.max(1), image::Rgb(rgb));
        Self::new(id, buf).expect("non-empty")
    }

    pub fn load(id: impl Into<String>, path: &Path) -> Result<Self, ImageLoadError> {
        let id = id.into();
        let img = image::open(path).map_err(|source| ImageLoadError::Decode {
            path: path.display().to_string(),
            source,
        })?;
        Self::new(id.clone(), img.to_rgb8()).ok_or(ImageLoadError::Empty(id))
    }

    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }

    pub fn encode_png(&self) -> Vec<u8> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.pixels
            .write_to(&mut out, image::ImageFormat::Png)
            .expect("png encoding to memory");
        out.into_inner()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_name: String,
    pub parameters: Value,
    pub parent: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolResult {
    pub image: RasterImage,
    pub provenance: Provenance,
}

fn fmt_coord(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

fn box_label(b: &BBox) -> String {
    format!(
        "[{}, {}, {}, {}]",
        fmt_coord(b.x1),
        fmt_coord(b.y1),
        fmt_coord(b.x2),
        fmt_coord(b.y2)
    )
}

/// Copies the pixels covered by `b`. Fractional edges are widened to whole
/// pixels (floor of the low edge, ceil of the high edge).
pub fn crop(img: &RasterImage, b: &BBox) -> Result<ToolResult, ToolError> {
    let (w, h) = (img.width() as f64, img.height() as f64);
    if !b.is_finite() || b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > w || b.y2 > h || b.area() <= 0.0 {
        return Err(ToolError::DegenerateBox);
    }
    let (px1, py1) = (b.x1.floor() as u32, b.y1.floor() as u32);
    let (px2, py2) = (b.x2.ceil() as u32, b.y2.ceil() as u32);
    let view = imageops::crop_imm(img.pixels.as_ref(), px1, py1, px2 - px1, py2 - py1).to_image();
    Ok(ToolResult {
        image: RasterImage::new(format!("{}/zoom{}", img.id, box_label(b)), view).expect("positive crop area"),
        provenance: Provenance {
            tool_name: ZOOM_TOOL.to_string(),
            parameters: json!({ "bbox_2d": b.to_array() }),
            parent: img.id.clone(),
        },
    })
}

/// Clockwise right-angle rotation.
pub fn rotate(img: &RasterImage, degrees: i64) -> Result<ToolResult, ToolError> {
    let pixels = match degrees {
        0 => img.pixels.as_ref().clone(),
        90 => imageops::rotate90(img.pixels.as_ref()),
        180 => imageops::rotate180(img.pixels.as_ref()),
        270 => imageops::rotate270(img.pixels.as_ref()),
        other => return Err(ToolError::UnsupportedAngle(other)),
    };
    Ok(ToolResult {
        image: RasterImage::new(format!("{}/rot{degrees}", img.id), pixels).expect("non-empty"),
        provenance: Provenance {
            tool_name: ROTATE_TOOL.to_string(),
            parameters: json!({ "degrees": degrees }),
            parent: img.id.clone(),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToolConfig {
    pub min_side: f64,
    /// Pixel side of one observation token when estimating image cost.
    pub patch_size: u32,
}

impl Default for ToolConfig {
    fn default() -> Self {
        Self {
            min_side: DEFAULT_MIN_SIDE,
            patch_size: 28,
        }
    }
}

/// Routes a call to its tool. Boxes always refer to `original`.
pub fn dispatch(call: &ToolCall, original: &RasterImage, cfg: &ToolConfig) -> Result<ToolResult, ToolError> {
    match call.name.as_str() {
        ZOOM_TOOL => {
            let raw = call
                .bbox()
                .ok_or_else(|| ToolError::BadArguments("bbox_2d must be 4 numbers".into()))?;
            let b = normalize_and_clamp(BBox::from(raw), original.width(), original.height(), cfg.min_side)?;
            crop(original, &b)
        }
        ROTATE_TOOL => {
            let deg = call
                .arguments
                .get("degrees")
                .and_then(|v| v.as_i64().or_else(|| v.as_f64().filter(|f| f.fract() == 0.0).map(|f| f as i64)))
                .ok_or_else(|| ToolError::BadArguments("degrees must be an integer".into()))?;
            rotate(original, deg)
        }
        other => Err(ToolError::UnknownTool(other.to_string())),
    }
}

/// What a rollout sees after one tool call.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub tool_name: String,
    pub image: Option<RasterImage>,
    pub note: String,
    pub error: Option<ToolError>,
    /// Normalized box for zoom calls that produced a crop.
    pub bbox: Option<BBox>,
}

impl Observation {
    /// Token cost: one token per `patch_size` square of image, plus the note.
    pub fn token_len(&self, cfg: &ToolConfig) -> usize {
        let p = cfg.patch_size.max(1);
        let image_tokens = self
            .image
            .as_ref()
            .map(|img| (img.width().div_ceil(p) * img.height().div_ceil(p)) as usize)
            .unwrap_or(0);
        (image_tokens + estimate_text_tokens(&self.note)).max(1)
    }
}

/// Whitespace-delimited word count.
pub fn estimate_text_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Runs a call and renders any failure into the observation note.
pub fn execute(call: &ToolCall, original: &RasterImage, cfg: &ToolConfig) -> Observation {
    match dispatch(call, original, cfg) {
        Ok(res) => {
            let (w, h) = (res.image.width(), res.image.height());
            let (note, bbox) = match res.provenance.tool_name.as_str() {
                ZOOM_TOOL => {
                    let b: BBox = serde_json::from_value(res.provenance.parameters["bbox_2d"].clone())
                        .expect("crop provenance holds a box");
                    (format!("Zoomed-in region {} of the original image ({w}x{h} px).", box_label(&b)), Some(b))
                }
                _ => (format!("Rotated image by {} degrees ({w}x{h} px).", res.provenance.parameters["degrees"]), None),
            };
            Observation {
                tool_name: res.provenance.tool_name.clone(),
                image: Some(res.image),
                note,
                error: None,
                bbox,
            }
        }
        Err(err) => {
            let note = match &err {
                ToolError::DegenerateBox => "empty region: the box lies outside the image.".to_string(),
                ToolError::UnsupportedAngle(d) => {
                    format!("unsupported rotation angle {d}; use 0, 90, 180 or 270.")
                }
                e => format!("tool error: {e}."),
            };
            Observation {
                tool_name: call.name.clone(),
                image: None,
                note,
                error: Some(err),
                bbox: None,
            }
        }
    }
}

/// Images referenced by a rollout, keyed by id.
#[derive(Debug, Clone, Default)]
pub struct ImageStore {
    images: BTreeMap<String, RasterImage>,
}

impl ImageStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, img: RasterImage) -> String {
        let id = img.id.clone();
        self.images.insert(id.clone(), img);
        id
    }

    pub fn get(&self, id: &str) -> Option<&RasterImage> {
        self.images.get(id)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn gradient(w: u32, h: u32) -> RasterImage {
        let buf = RgbImage::from_fn(w, h, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, ((x * 7 + y * 13) % 256) as u8]));
        RasterImage::new("src", buf).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let b = normalize_and_clamp(BBox::new(100.0, 50.0, 10.0, 20.0), 1000, 1000, 10.0).unwrap();
        assert_eq!(b.to_array(), [10.0, 20.0, 100.0, 50.0]);
        let b = normalize_and_clamp(BBox::new(-20.0, -20.0, 50.0, 50.0), 100, 100, 10.0).unwrap();
        assert_eq!(b.to_array(), [0.0, 0.0, 50.0, 50.0]);
        assert_eq!(
            normalize_and_clamp(BBox::new(2000.0, 2000.0, 2100.0, 2100.0), 100, 100, 10.0),
            Err(ToolError::DegenerateBox)
        );
    }

    #[test]
    fn tiny_boxes_expand_to_min_side() {
        let b = normalize_and_clamp(BBox::new(50.0, 50.0, 52.0, 54.0), 100, 100, 10.0).unwrap();
        assert_eq!(b.to_array(), [46.0, 47.0, 56.0, 57.0]);
        let edge = normalize_and_clamp(BBox::new(0.0, 98.0, 2.0, 100.0), 100, 100, 10.0).unwrap();
        assert_eq!(edge.to_array(), [0.0, 90.0, 10.0, 100.0]);
        let small_img = normalize_and_clamp(BBox::new(1.0, 1.0, 2.0, 2.0), 5, 5, 10.0).unwrap();
        assert_eq!(small_img.to_array(), [0.0, 0.0, 5.0, 5.0]);
    }

    #[test]
    fn crop_example_dimensions() {
        let img = gradient(640, 480);
        let r = crop(&img, &BBox::new(10.0, 20.0, 100.0, 200.0)).unwrap();
        assert_eq!((r.image.width(), r.image.height()), (90, 180));
        assert_eq!(r.provenance.parent, "src");
        assert_eq!(r.provenance.parameters, json!({"bbox_2d": [10.0, 20.0, 100.0, 200.0]}));
        assert_eq!(*r.image.pixels.get_pixel(0, 0), *img.pixels.get_pixel(10, 20));
    }

    #[test]
    fn full_crop_is_identity() {
        let img = gradient(37, 23);
        let r = crop(&img, &BBox::new(0.0, 0.0, 37.0, 23.0)).unwrap();
        assert_eq!(*r.image.pixels, *img.pixels);
    }

    #[test]
    fn rotate_examples() {
        let img = gradient(31, 17);
        assert_eq!(*rotate(&img, 0).unwrap().image.pixels, *img.pixels);
        let r90 = rotate(&img, 90).unwrap().image;
        assert_eq!((r90.width(), r90.height()), (17, 31));
        assert_eq!(*rotate(&r90, 270).unwrap().image.pixels, *img.pixels);
        let r180 = rotate(&img, 180).unwrap().image;
        for (x, y, p) in img.pixels.enumerate_pixels() {
            assert_eq!(r180.pixels.get_pixel(30 - x, 16 - y), p);
        }
        assert_eq!(rotate(&img, 45), Err(ToolError::UnsupportedAngle(45)));
    }

    #[test]
    fn rotate_90_is_clockwise() {
        let img = gradient(4, 2);
        let r = rotate(&img, 90).unwrap().image;
        // Top-left of the source ends up top-right.
        assert_eq!(r.pixels.get_pixel(1, 0), img.pixels.get_pixel(0, 0));
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(20.0, 20.0, 30.0, 30.0)), 0.0);
        assert!((iou(&a, &BBox::new(5.0, 0.0, 15.0, 10.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn dispatch_routes_and_reports() {
        let img = gradient(640, 480);
        let cfg = ToolConfig::default();
        let zoom = crate::protocol::parse_turn(r#"<tool_call>{"name": "image_zoom_in_tool", "arguments": {"bbox_2d": [10, 20, 100, 200], "label": "the apple on the desk"}}</tool_call>"#)
            .tool_calls
            .remove(0);
        let r = dispatch(&zoom, &img, &cfg).unwrap();
        assert_eq!(r.provenance.tool_name, ZOOM_TOOL);
        assert_eq!((r.image.width(), r.image.height()), (90, 180));

        let mut args = serde_json::Map::new();
        args.insert("degrees".into(), json!(90));
        let r = dispatch(&ToolCall::new(ROTATE_TOOL, args), &img, &cfg).unwrap();
        assert_eq!((r.image.width(), r.image.height()), (480, 640));

        let out = execute(&ToolCall::zoom([2000.0, 2000.0, 2100.0, 2100.0]), &img, &cfg);
        assert!(out.image.is_none());
        assert!(out.note.starts_with("empty region"));
        assert_eq!(out.error, Some(ToolError::DegenerateBox));

        let unknown = execute(&ToolCall::new("zoom_tool", serde_json::Map::new()), &img, &cfg);
        assert_eq!(unknown.error, Some(ToolError::UnknownTool("zoom_tool".into())));
    }

    #[test]
    fn observation_token_estimate() {
        let img = gradient(640, 480);
        let cfg = ToolConfig::default();
        let obs = execute(&ToolCall::zoom([0.0, 0.0, 56.0, 57.0]), &img, &cfg);
        assert_eq!(obs.token_len(&cfg), 2 * 3 + estimate_text_tokens(&obs.note));
    }

    #[test]
    fn bbox_serializes_as_array() {
        let b = BBox::new(1.0, 2.5, 3.0, 4.0);
        assert_eq!(serde_json::to_string(&b).unwrap(), "[1.0,2.5,3.0,4.0]");
        let back: BBox = serde_json::from_str("[1,2.5,3,4]").unwrap();
        assert_eq!(back, b);
    }
}

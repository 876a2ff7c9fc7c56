//! Image in, boxes out: letterboxing, distribution decoding, NMS, drawing.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ImageEncoder, ImageFormat, Rgb, RgbImage};
use serde_json::{Map, Number, Value};

use crate::blocks::HeadConfig;
use crate::error::{Error, Result};
use crate::eval::iou;
use crate::tensor::{softmax_channelwise, Tensor};

/// Network input side length.
pub const INPUT_SIZE: usize = 640;
pub const PAD_VALUE: f32 = 114.0 / 255.0;
pub const DEFAULT_CONF: f64 = 0.25;
pub const DEFAULT_IOU: f64 = 0.45;

/// How an original image sits inside the square network input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LetterboxMeta {
    pub scale: f64,
    pub pad_left: usize,
    pub pad_top: usize,
    pub orig_w: usize,
    pub orig_h: usize,
    pub resized_w: usize,
    pub resized_h: usize,
    pub input_size: usize,
}

impl LetterboxMeta {
    pub fn new(orig_w: usize, orig_h: usize, input_size: usize) -> Result<Self> {
        if orig_w == 0 || orig_h == 0 {
            return Err(Error::Input(format!("empty image {orig_w}x{orig_h}")));
        }
        if input_size == 0 {
            return Err(Error::Input("letterbox target size is zero".into()));
        }
        let s = input_size as f64;
        let scale = (s / orig_w as f64).min(s / orig_h as f64);
        let resized = |d: usize| ((d as f64 * scale).round() as usize).clamp(1, input_size);
        let (resized_w, resized_h) = (resized(orig_w), resized(orig_h));
        Ok(LetterboxMeta {
            scale,
            pad_left: (input_size - resized_w) / 2,
            pad_top: (input_size - resized_h) / 2,
            orig_w,
            orig_h,
            resized_w,
            resized_h,
            input_size,
        })
    }

    pub fn to_letterbox(&self, x: f64, y: f64) -> (f64, f64) {
        (x * self.scale + self.pad_left as f64, y * self.scale + self.pad_top as f64)
    }

    pub fn to_original(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.pad_left as f64) / self.scale,
            (y - self.pad_top as f64) / self.scale,
        )
    }
}

/// Nearest-neighbour, aspect-preserving resize into a padded square,
/// scaled to `[0, 1]`.
pub fn letterbox(img: &RgbImage, input_size: usize) -> Result<(Tensor, LetterboxMeta)> {
    let meta = LetterboxMeta::new(img.width() as usize, img.height() as usize, input_size)?;
    let mut t = Tensor::full([1, 3, input_size, input_size], PAD_VALUE);
    let src_x: Vec<u32> = (0..meta.resized_w)
        .map(|x| (((x as f64 + 0.5) * meta.orig_w as f64 / meta.resized_w as f64) as usize).min(meta.orig_w - 1) as u32)
        .collect();
    for y in 0..meta.resized_h {
        let sy = (((y as f64 + 0.5) * meta.orig_h as f64 / meta.resized_h as f64) as usize).min(meta.orig_h - 1) as u32;
        for (x, &sx) in src_x.iter().enumerate() {
            let px = img.get_pixel(sx, sy);
            for c in 0..3 {
                t.set(0, c, y + meta.pad_top, x + meta.pad_left, f32::from(px[c]) / 255.0);
            }
        }
    }
    Ok((t, meta))
}

/// Per side, softmax over `reg_max` bins then `Σ i·p_i`. Output has 4
/// channels `(l, t, r, b)` in stride units.
pub fn dfl_expectation(box_logits: &Tensor, reg_max: usize) -> Result<Tensor> {
    if reg_max == 0 || box_logits.c() != 4 * reg_max {
        return Err(Error::Spec(format!(
            "distribution map has {} channels, expected 4·{reg_max}",
            box_logits.c()
        )));
    }
    let p = softmax_channelwise(box_logits, reg_max)?;
    let [n, _, h, w] = p.dims();
    let mut out = Tensor::zeros([n, 4, h, w]);
    for ni in 0..n {
        for side in 0..4 {
            let dst = out.plane_mut(ni, side);
            for bin in 0..reg_max {
                let src = p.plane(ni, side * reg_max + bin);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += bin as f32 * s;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub class_name: String,
    pub score: f64,
    /// `(x1, y1, x2, y2)` in original-image pixels.
    pub bbox: [f64; 4],
}

fn sigmoid(v: f32) -> f64 {
    1.0 / (1.0 + (-f64::from(v)).exp())
}

pub fn class_name(names: &[String], id: usize) -> String {
    names.get(id).cloned().unwrap_or_else(|| format!("class{id}"))
}

/// Turns raw head maps (batch element 0) into scored boxes in original
/// image coordinates, before NMS.
pub fn decode_detections(
    maps: &[Tensor; 3],
    cfg: &HeadConfig,
    meta: &LetterboxMeta,
    conf_thresh: f64,
    names: &[String],
) -> Result<Vec<Detection>> {
    let nb = cfg.box_channels();
    let mut dets = Vec::new();
    for (level, (map, &stride)) in maps.iter().zip(&cfg.strides).enumerate() {
        let [n, c, h, w] = map.dims();
        if n == 0 {
            return Err(Error::Spec(format!("level {level}: empty batch")));
        }
        if c != cfg.outputs_per_level() {
            return Err(Error::Spec(format!(
                "level {level}: {c} channels, expected {}",
                cfg.outputs_per_level()
            )));
        }
        if stride == 0 || h * stride != meta.input_size || w * stride != meta.input_size {
            return Err(Error::Spec(format!(
                "level {level}: {h}x{w} map with stride {stride} does not cover a {0}x{0} input",
                meta.input_size
            )));
        }
        let plane = h * w;
        let first = &map.data()[..c * plane];
        let box_logits = Tensor::from_vec([1, nb, h, w], first[..nb * plane].to_vec())?;
        let dist = dfl_expectation(&box_logits, cfg.reg_max)?;
        let s = stride as f64;
        for cy in 0..h {
            for cx in 0..w {
                let p = cy * w + cx;
                let mut best = (0usize, f32::NEG_INFINITY);
                for k in 0..cfg.nc {
                    let v = first[(nb + k) * plane + p];
                    if v > best.1 {
                        best = (k, v);
                    }
                }
                let score = sigmoid(best.1);
                if score < conf_thresh {
                    continue;
                }
                let d = |side: usize| f64::from(dist.plane(0, side)[p]);
                let (l, t, r, b) = (d(0), d(1), d(2), d(3));
                if l + r <= 0.0 || t + b <= 0.0 {
                    continue;
                }
                let (ax, ay) = ((cx as f64 + 0.5) * s, (cy as f64 + 0.5) * s);
                let (x1, y1) = meta.to_original(ax - l * s, ay - t * s);
                let (x2, y2) = meta.to_original(ax + r * s, ay + b * s);
                let bbox = [
                    x1.clamp(0.0, meta.orig_w as f64),
                    y1.clamp(0.0, meta.orig_h as f64),
                    x2.clamp(0.0, meta.orig_w as f64),
                    y2.clamp(0.0, meta.orig_h as f64),
                ];
                if bbox[0] >= bbox[2] || bbox[1] >= bbox[3] {
                    continue;
                }
                dets.push(Detection {
                    class_id: best.0,
                    class_name: class_name(names, best.0),
                    score,
                    bbox,
                });
            }
        }
    }
    Ok(dets)
}

/// Greedy class-aware suppression. Candidates are visited by descending
/// score, then class id, then input position; a box is dropped when it
/// overlaps an already kept box of its class with IoU at or above
/// `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .total_cmp(&dets[a].score)
            .then(dets[a].class_id.cmp(&dets[b].class_id))
            .then(a.cmp(&b))
    });
    let mut kept: Vec<&Detection> = Vec::new();
    for i in order {
        let d = &dets[i];
        if kept
            .iter()
            .all(|k| k.class_id != d.class_id || iou(&k.bbox, &d.bbox) < iou_thresh)
        {
            kept.push(d);
        }
    }
    kept.into_iter().cloned().collect()
}

/// Full path from an RGB image to final detections.
pub fn detect(
    net: &crate::model::Network,
    img: &RgbImage,
    conf_thresh: f64,
    iou_thresh: f64,
    names: &[String],
) -> Result<Vec<Detection>> {
    let (x, meta) = letterbox(img, INPUT_SIZE)?;
    let maps = net.forward(&x)?;
    let dets = decode_detections(&maps, net.graph().head_config(), &meta, conf_thresh, names)?;
    Ok(nms(&dets, iou_thresh))
}

const PALETTE: [[u8; 3]; 8] = [
    [255, 56, 56],
    [56, 255, 56],
    [56, 56, 255],
    [255, 157, 0],
    [255, 56, 255],
    [0, 212, 212],
    [255, 255, 0],
    [132, 56, 255],
];

pub fn class_color(class_id: usize) -> Rgb<u8> {
    Rgb(PALETTE[class_id % PALETTE.len()])
}

/// Pixel rectangle covered by a box: `(x0, y0, x1, y1)` inclusive, or `None`
/// if it misses the image.
pub fn pixel_rect(bbox: &[f64; 4], w: u32, h: u32) -> Option<(u32, u32, u32, u32)> {
    if w == 0 || h == 0 {
        return None;
    }
    let x0 = bbox[0].floor().max(0.0) as u32;
    let y0 = bbox[1].floor().max(0.0) as u32;
    let x1 = (bbox[2].ceil() as i64 - 1).min(i64::from(w) - 1);
    let y1 = (bbox[3].ceil() as i64 - 1).min(i64::from(h) - 1);
    if x1 < i64::from(x0) || y1 < i64::from(y0) {
        return None;
    }
    Some((x0, y0, x1 as u32, y1 as u32))
}

/// Copy of `img` with a 2-px outline per detection in its class colour.
pub fn annotate(img: &RgbImage, dets: &[Detection]) -> RgbImage {
    let mut out = img.clone();
    for d in dets {
        let Some((x0, y0, x1, y1)) = pixel_rect(&d.bbox, img.width(), img.height()) else {
            continue;
        };
        let color = class_color(d.class_id);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if x < x0 + 2 || x + 2 > x1 || y < y0 + 2 || y + 2 > y1 {
                    out.put_pixel(x, y, color);
                }
            }
        }
    }
    out
}

/// Decodes a binary (P6, maxval 255) PPM.
pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    if !bytes.starts_with(b"P6") {
        return Err(Error::Format {
            offset: 0,
            msg: "not a binary PPM (expected P6 magic)".into(),
        });
    }
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Pnm)?;
    if !matches!(img, image::DynamicImage::ImageRgb8(_)) {
        return Err(Error::Format {
            offset: 0,
            msg: "PPM maxval must be 255".into(),
        });
    }
    Ok(img.into_rgb8())
}

pub fn encode_ppm(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    PnmEncoder::new(&mut buf)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)?;
    Ok(buf)
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    decode_ppm(&bytes)
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    crate::io::atomic_write(path, &encode_ppm(img)?)
}

/// A JSON number printed with exactly four decimals.
pub fn fixed4(v: f64) -> Value {
    let s = format!("{:.4}", v + 0.0);
    Value::Number(s.parse::<Number>().expect("formatted float is a valid JSON number"))
}

pub fn detection_to_json(d: &Detection) -> Value {
    let mut m = Map::new();
    m.insert("class_id".into(), Value::from(d.class_id));
    m.insert("class_name".into(), Value::from(d.class_name.clone()));
    m.insert("score".into(), fixed4(d.score));
    m.insert("box".into(), Value::Array(d.bbox.iter().map(|&v| fixed4(v)).collect()));
    Value::Object(m)
}

/// Pretty JSON array with sorted keys and fixed 4-decimal numbers.
pub fn detections_to_json(dets: &[Detection]) -> String {
    let arr = Value::Array(dets.iter().map(detection_to_json).collect());
    serde_json::to_string_pretty(&arr).expect("JSON values always serialize")
}

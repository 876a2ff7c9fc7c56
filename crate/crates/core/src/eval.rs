//! Dataset loading, detection-to-truth matching, precision/recall and AP@0.5.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::{Map, Value};

use crate::detect::{fixed4, Detection};
use crate::error::{Error, Result};

pub const MATCH_IOU: f64 = 0.5;

/// Intersection over union of two `(x1, y1, x2, y2)` boxes; 0 when the
/// union is empty.
pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: &[f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthBox {
    pub class_id: usize,
    /// Normalized `(cx, cy, w, h)`.
    pub norm: [f64; 4],
    /// Pixel `(x1, y1, x2, y2)`.
    pub bbox: [f64; 4],
}

impl GroundTruthBox {
    pub fn from_normalized(class_id: usize, norm: [f64; 4], img_w: usize, img_h: usize) -> Self {
        let [cx, cy, w, h] = norm;
        let (iw, ih) = (img_w as f64, img_h as f64);
        GroundTruthBox {
            class_id,
            norm,
            bbox: [(cx - w / 2.0) * iw, (cy - h / 2.0) * ih, (cx + w / 2.0) * iw, (cy + h / 2.0) * ih],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetItem {
    pub image: PathBuf,
    pub label: PathBuf,
    pub width: usize,
    pub height: usize,
    pub truths: Vec<GroundTruthBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub items: Vec<DatasetItem>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    classes: Vec<String>,
    items: Vec<ManifestItem>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestItem {
    image: PathBuf,
    label: PathBuf,
}

/// Parses YOLO-format label text: `class cx cy w h` per line, blank lines
/// ignored.
pub fn parse_labels(text: &str, path: &Path, nc: usize, img_w: usize, img_h: usize) -> Result<Vec<GroundTruthBox>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields \"class cx cy w h\", found {}", fields.len())));
        }
        let class_id: usize = fields[0]
            .parse()
            .map_err(|_| err(format!("class id {:?} is not a non-negative integer", fields[0])))?;
        let mut norm = [0.0; 4];
        for (v, f) in norm.iter_mut().zip(&fields[1..]) {
            *v = f.parse().map_err(|_| err(format!("{f:?} is not a number")))?;
            if !(0.0..=1.0).contains(v) {
                return Err(err(format!("{f} outside [0, 1]")));
            }
        }
        if norm[2] <= 0.0 || norm[3] <= 0.0 {
            return Err(err("box width and height must be positive".into()));
        }
        if class_id >= nc {
            return Err(Error::Validation(format!(
                "{}:{line_no}: class id {class_id} but only {nc} classes",
                path.display()
            )));
        }
        out.push(GroundTruthBox::from_normalized(class_id, norm, img_w, img_h));
    }
    Ok(out)
}

/// Reads a manifest and every label file it lists. Relative paths are
/// taken from the manifest's directory.
pub fn load_dataset(manifest: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(manifest)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", manifest.display()))))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.classes.is_empty() {
        return Err(Error::Validation("manifest lists no classes".into()));
    }
    let base = manifest.parent().unwrap_or(Path::new(""));
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    let pairs: Vec<(PathBuf, PathBuf)> = m.items.iter().map(|i| (resolve(&i.image), resolve(&i.label))).collect();

    let missing: Vec<String> = pairs
        .iter()
        .flat_map(|(a, b)| [a, b])
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("missing dataset files: {}", missing.join(", ")),
        )));
    }

    let mut items = Vec::with_capacity(pairs.len());
    for (image, label) in pairs {
        let (w, h) = image::ImageReader::open(&image)?.with_guessed_format()?.into_dimensions()?;
        let truths = parse_labels(&std::fs::read_to_string(&label)?, &label, m.classes.len(), w as usize, h as usize)?;
        items.push(DatasetItem {
            image,
            label,
            width: w as usize,
            height: h as usize,
            truths,
        });
    }
    Ok(Dataset {
        classes: m.classes,
        items,
    })
}

/// Indices of `dets` by descending score, input order on ties.
pub fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchResult {
    /// True positive flag per detection, in input order.
    pub tp: Vec<bool>,
    /// Index of the matched truth per detection.
    pub matched: Vec<Option<usize>>,
    /// Truths no detection claimed.
    pub false_negatives: usize,
}

/// Greedy same-class matching by descending score: each detection takes
/// the unclaimed truth of its class with the highest IoU, if that IoU is at
/// least `iou_thresh`.
pub fn match_detections(dets: &[Detection], truths: &[GroundTruthBox], iou_thresh: f64) -> MatchResult {
    let mut claimed = vec![false; truths.len()];
    let mut matched = vec![None; dets.len()];
    for i in score_order(dets) {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, t) in truths.iter().enumerate() {
            if claimed[j] || t.class_id != d.class_id {
                continue;
            }
            let v = iou(&d.bbox, &t.bbox);
            if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            claimed[j] = true;
            matched[i] = Some(j);
        }
    }
    MatchResult {
        tp: matched.iter().map(Option::is_some).collect(),
        matched,
        false_negatives: claimed.iter().filter(|c| !**c).count(),
    }
}

/// All-point interpolated area under the precision envelope. `flags` are TP
/// markers in descending score order. `None` when there are no truths.
pub fn average_precision_50(flags: &[bool], total_truths: usize) -> Option<f64> {
    if total_truths == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(flags.len());
    for (k, &f) in flags.iter().enumerate() {
        tp += usize::from(f);
        points.push((tp as f64 / total_truths as f64, tp as f64 / (k + 1) as f64));
    }
    let mut envelope = 0.0f64;
    for p in points.iter_mut().rev() {
        envelope = envelope.max(p.1);
        p.1 = envelope;
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        area += (r - prev_recall) * p;
        prev_recall = r;
    }
    Some(area)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassReport {
    pub class_id: usize,
    pub name: String,
    pub truths: usize,
    pub detections: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    /// Absent when the class has no ground truth.
    pub ap50: Option<f64>,
    /// Set when no detection was counted, so precision is 0 by convention.
    pub precision_undefined: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    pub map50: f64,
    /// Classes averaged into `map50`.
    pub map_classes: usize,
    pub images: usize,
    pub total_truths: usize,
    pub total_detections: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub precision_undefined: bool,
    pub score_cutoff: Option<f64>,
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

/// Scores `detections[i]` against `dataset.items[i]`. Precision and recall
/// count detections with score at or above `score_cutoff` (all when `None`);
/// AP always uses the full ranked list.
pub fn evaluate(dataset: &Dataset, detections: &[Vec<Detection>], score_cutoff: Option<f64>) -> Result<EvalReport> {
    if dataset.items.is_empty() {
        return Err(Error::Validation("dataset has no images".into()));
    }
    if detections.len() != dataset.items.len() {
        return Err(Error::Validation(format!(
            "{} detection lists for {} images",
            detections.len(),
            dataset.items.len()
        )));
    }
    let nc = dataset.classes.len();
    // (score, image path, detection index, tp) per class
    let mut pooled: Vec<Vec<(f64, &Path, usize, bool)>> = vec![Vec::new(); nc];
    let mut truths = vec![0usize; nc];
    for (item, dets) in dataset.items.iter().zip(detections) {
        if let Some(d) = dets.iter().find(|d| d.class_id >= nc) {
            return Err(Error::Validation(format!(
                "detection class {} but the dataset has {nc} classes",
                d.class_id
            )));
        }
        for t in &item.truths {
            truths[t.class_id] += 1;
        }
        let m = match_detections(dets, &item.truths, MATCH_IOU);
        for (i, d) in dets.iter().enumerate() {
            pooled[d.class_id].push((d.score, item.image.as_path(), i, m.tp[i]));
        }
    }

    let mut classes = Vec::with_capacity(nc);
    for (c, mut list) in pooled.into_iter().enumerate() {
        list.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| a.1.cmp(b.1))
                .then(a.2.cmp(&b.2))
        });
        let flags: Vec<bool> = list.iter().map(|e| e.3).collect();
        let ap50 = average_precision_50(&flags, truths[c]);
        let counted: Vec<bool> = list
            .iter()
            .filter(|e| score_cutoff.is_none_or(|s| e.0.partial_cmp(&s) != Some(Ordering::Less)))
            .map(|e| e.3)
            .collect();
        let tp = counted.iter().filter(|f| **f).count();
        let fp = counted.len() - tp;
        let (precision, precision_undefined) = ratio(tp, tp + fp);
        classes.push(ClassReport {
            class_id: c,
            name: dataset.classes[c].clone(),
            truths: truths[c],
            detections: counted.len(),
            tp,
            fp,
            fn_: truths[c] - tp,
            precision,
            recall: ratio(tp, truths[c]).0,
            ap50,
            precision_undefined,
        });
    }

    let aps: Vec<f64> = classes.iter().filter_map(|c| c.ap50).collect();
    let map50 = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
    let tp: usize = classes.iter().map(|c| c.tp).sum();
    let fp: usize = classes.iter().map(|c| c.fp).sum();
    let total_truths: usize = truths.iter().sum();
    let (precision, precision_undefined) = ratio(tp, tp + fp);
    Ok(EvalReport {
        map50,
        map_classes: aps.len(),
        images: dataset.items.len(),
        total_truths,
        total_detections: tp + fp,
        tp,
        fp,
        fn_: total_truths - tp,
        precision,
        recall: ratio(tp, total_truths).0,
        precision_undefined,
        score_cutoff,
        classes,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let class_rows: Vec<Value> = self
            .classes
            .iter()
            .map(|c| {
                let mut m = Map::new();
                m.insert("class_id".into(), c.class_id.into());
                m.insert("name".into(), c.name.clone().into());
                m.insert("truths".into(), c.truths.into());
                m.insert("detections".into(), c.detections.into());
                m.insert("tp".into(), c.tp.into());
                m.insert("fp".into(), c.fp.into());
                m.insert("fn".into(), c.fn_.into());
                m.insert("precision".into(), fixed4(c.precision));
                m.insert("recall".into(), fixed4(c.recall));
                m.insert("ap50".into(), c.ap50.map_or(Value::Null, fixed4));
                m.insert("precision_undefined".into(), c.precision_undefined.into());
                Value::Object(m)
            })
            .collect();
        let mut m = Map::new();
        m.insert("classes".into(), Value::Array(class_rows));
        m.insert("map50".into(), fixed4(self.map50));
        m.insert("map_classes".into(), self.map_classes.into());
        m.insert("images".into(), self.images.into());
        m.insert("truths".into(), self.total_truths.into());
        m.insert("detections".into(), self.total_detections.into());
        m.insert("tp".into(), self.tp.into());
        m.insert("fp".into(), self.fp.into());
        m.insert("fn".into(), self.fn_.into());
        m.insert("precision".into(), fixed4(self.precision));
        m.insert("recall".into(), fixed4(self.recall));
        m.insert("precision_undefined".into(), self.precision_undefined.into());
        m.insert("score_cutoff".into(), self.score_cutoff.map_or(Value::Null, fixed4));
        serde_json::to_string_pretty(&Value::Object(m)).expect("JSON values always serialize")
    }

    /// One row per class plus an `all` row whose AP column is the mAP.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,truths,detections,tp,fp,fn,precision,recall,ap50\n");
        for c in &self.classes {
            let ap = c.ap50.map_or(String::new(), |v| format!("{v:.4}"));
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{:.4},{:.4},{}",
                csv_field(&c.name),
                c.truths,
                c.detections,
                c.tp,
                c.fp,
                c.fn_,
                c.precision,
                c.recall,
                ap
            );
        }
        let _ = writeln!(
            s,
            "all,{},{},{},{},{},{:.4},{:.4},{:.4}",
            self.total_truths, self.total_detections, self.tp, self.fp, self.fn_, self.precision, self.recall, self.map50
        );
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Runs `net` over every dataset image and scores the result.
pub fn run_eval(
    net: &crate::model::Network,
    dataset: &Dataset,
    conf_thresh: f64,
    iou_thresh: f64,
    score_cutoff: Option<f64>,
) -> Result<EvalReport> {
    if net.graph().nc() != dataset.classes.len() {
        return Err(Error::Validation(format!(
            "model has {} classes, dataset has {}",
            net.graph().nc(),
            dataset.classes.len()
        )));
    }
    let dets = dataset
        .items
        .iter()
        .map(|item| {
            let img = crate::detect::read_ppm(&item.image)?;
            crate::detect::detect(net, &img, conf_thresh, iou_thresh, &dataset.classes)
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate(dataset, &dets, score_cutoff)
}

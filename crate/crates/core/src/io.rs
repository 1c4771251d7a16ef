//! Dataset directories, annotation files and raw images.
//!
//! A dataset directory holds `manifest.txt`, `annotations.txt` and one
//! `images/NNNNNN.raw` per image. Raw images are three little-endian `u32`
//! values (width, height, channels) followed by `f32` pixels in CHW order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::boxes::{BBox, Detection, GroundTruth};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ANNOTATION_HEADER: &str = "image_id x1 y1 x2 y2 visibility score circle";
pub const MANIFEST: &str = "manifest.txt";
pub const ANNOTATIONS: &str = "annotations.txt";
pub const IMAGES: &str = "images";

/// One line of an annotation or detection file.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub image: usize,
    pub bbox: BBox,
    pub visibility: Option<f64>,
    pub score: Option<f64>,
    pub circle: Option<usize>,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

pub fn format_records(records: &[Record]) -> String {
    let mut s = format!("{ANNOTATION_HEADER}\n");
    for r in records {
        let b = r.bbox;
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} {} {}",
            r.image,
            b.x1,
            b.y1,
            b.x2,
            b.y2,
            opt(r.visibility),
            opt(r.score),
            opt(r.circle)
        );
    }
    s
}

pub fn parse_records(text: &str, path: &Path) -> Result<Vec<Record>> {
    let err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == ANNOTATION_HEADER => {}
        _ => return Err(err(1, format!("expected header `{ANNOTATION_HEADER}`"))),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 8 {
            return Err(err(line_no, format!("expected 8 fields, found {}", f.len())));
        }
        let num = |k: usize| -> Result<f64> {
            f[k].parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(line_no, format!("bad number `{}`", f[k])))
        };
        let opt_num = |k: usize| -> Result<Option<f64>> { if f[k] == "-" { Ok(None) } else { num(k).map(Some) } };
        let image = f[0].parse().map_err(|_| err(line_no, format!("bad image id `{}`", f[0])))?;
        let bbox = BBox::checked(num(1)?, num(2)?, num(3)?, num(4)?)
            .map_err(|e| err(line_no, e.to_string()))?;
        let visibility = opt_num(5)?;
        if let Some(v) = visibility {
            if !(0.0..=1.0).contains(&v) {
                return Err(err(line_no, format!("visibility {v} outside [0, 1]")));
            }
        }
        let score = opt_num(6)?;
        let circle = match f[7] {
            "-" => None,
            c => Some(c.parse().map_err(|_| err(line_no, format!("bad circle `{c}`")))?),
        };
        out.push(Record { image, bbox, visibility, score, circle });
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    fs::write(path, format_records(records)).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_records(&text, path)
}

pub fn ground_truth_records(gts: &[Vec<GroundTruth>]) -> Vec<Record> {
    gts.iter()
        .enumerate()
        .flat_map(|(i, g)| {
            g.iter().map(move |g| Record {
                image: i,
                bbox: g.bbox,
                visibility: Some(g.visibility),
                score: None,
                circle: None,
            })
        })
        .collect()
}

pub fn detection_records(dets: &[Vec<Detection>]) -> Vec<Record> {
    dets.iter()
        .enumerate()
        .flat_map(|(i, d)| {
            d.iter().map(move |d| Record {
                image: i,
                bbox: d.bbox,
                visibility: None,
                score: Some(d.score),
                circle: d.circle,
            })
        })
        .collect()
}

/// Ground truths per image; every record needs a visibility.
pub fn group_ground_truths(records: &[Record], images: usize, path: &Path) -> Result<Vec<Vec<GroundTruth>>> {
    let mut out = vec![Vec::new(); images];
    for (i, r) in records.iter().enumerate() {
        let slot = out.get_mut(r.image).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            msg: format!("image id {} out of range for {images} images", r.image),
        })?;
        let visibility = r.visibility.ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            msg: "ground truth without visibility".into(),
        })?;
        slot.push(GroundTruth { bbox: r.bbox, visibility });
    }
    Ok(out)
}

/// Detections per image; every record needs a score.
pub fn group_detections(records: &[Record], images: usize, path: &Path) -> Result<Vec<Vec<Detection>>> {
    let mut out = vec![Vec::new(); images];
    for (i, r) in records.iter().enumerate() {
        let slot = out.get_mut(r.image).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            msg: format!("image id {} out of range for {images} images", r.image),
        })?;
        let score = r.score.ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            msg: "detection without score".into(),
        })?;
        slot.push(Detection { bbox: r.bbox, score, circle: r.circle });
    }
    Ok(out)
}

pub fn encode_image(image: &Tensor<f32>) -> Vec<u8> {
    let [_, c, h, w] = image.shape();
    let mut out = Vec::with_capacity(12 + 4 * image.numel());
    for v in [w, h, c] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &v in image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let bad = |msg: String| Error::Parse { path: path.to_path_buf(), line: 0, msg };
    if bytes.len() < 12 {
        return Err(bad("raw image shorter than its header".into()));
    }
    let dim = |k: usize| u32::from_le_bytes(bytes[4 * k..4 * k + 4].try_into().unwrap()) as usize;
    let (w, h, c) = (dim(0), dim(1), dim(2));
    let n = w.checked_mul(h).and_then(|x| x.checked_mul(c)).ok_or_else(|| bad("image too large".into()))?;
    if bytes.len() != 12 + 4 * n {
        return Err(bad(format!("{w}x{h}x{c} image needs {} bytes, found {}", 12 + 4 * n, bytes.len())));
    }
    let data = bytes[12..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    Tensor::new([1, c, h, w], data)
}

pub fn image_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(IMAGES).join(format!("{index:06}.raw"))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub config_hash: String,
    pub seed: u64,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        format!(
            "format=circlenet-dataset-1\ncount={}\nwidth={}\nheight={}\nseed={}\nconfig_hash={}\n",
            self.count, self.width, self.height, self.seed, self.config_hash
        )
    }

    pub fn parse(text: &str, path: &Path) -> Result<Manifest> {
        let mut kv = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected key=value, got `{line}`"),
            })?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            kv.get(k).cloned().ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                msg: format!("missing `{k}`"),
            })
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?.parse().map_err(|_| Error::Parse { path: path.to_path_buf(), line: 0, msg: format!("bad `{k}`") })
        };
        if get("format")? != "circlenet-dataset-1" {
            return Err(Error::Parse { path: path.to_path_buf(), line: 1, msg: "unknown dataset format".into() });
        }
        Ok(Manifest {
            count: num("count")? as usize,
            width: num("width")? as usize,
            height: num("height")? as usize,
            seed: num("seed")?,
            config_hash: get("config_hash")?,
        })
    }
}

pub struct Dataset {
    pub manifest: Manifest,
    pub images: Vec<Tensor<f32>>,
    pub gts: Vec<Vec<GroundTruth>>,
}

pub fn save_dataset(dir: &Path, manifest: &Manifest, images: &[Tensor<f32>], gts: &[Vec<GroundTruth>]) -> Result<()> {
    let img_dir = dir.join(IMAGES);
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    for (i, img) in images.iter().enumerate() {
        let p = image_path(dir, i);
        fs::write(&p, encode_image(img)).map_err(|e| Error::io(&p, e))?;
    }
    write_records(&dir.join(ANNOTATIONS), &ground_truth_records(gts))?;
    let p = dir.join(MANIFEST);
    fs::write(&p, manifest.to_text()).map_err(|e| Error::io(&p, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mp = dir.join(MANIFEST);
    let manifest = Manifest::parse(&fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?, &mp)?;
    let images = (0..manifest.count)
        .map(|i| {
            let p = image_path(dir, i);
            let img = decode_image(&fs::read(&p).map_err(|e| Error::io(&p, e))?, &p)?;
            let [_, _, h, w] = img.shape();
            if (w, h) != (manifest.width, manifest.height) {
                return Err(Error::Parse {
                    path: p,
                    line: 0,
                    msg: format!("image is {w}x{h}, manifest says {}x{}", manifest.width, manifest.height),
                });
            }
            Ok(img)
        })
        .collect::<Result<Vec<_>>>()?;
    let ap = dir.join(ANNOTATIONS);
    let gts = group_ground_truths(&read_records(&ap)?, manifest.count, &ap)?;
    Ok(Dataset { manifest, images, gts })
}

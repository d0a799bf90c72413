//! On-disk dataset layout: one directory per sample holding `rgb.ppm` (P6),
//! `aux.ppm` (P6), `gt.pgm` (P5, 0/255) and `meta.json`; `index.json` at
//! the root lists the sample directories and the degradation cells they
//! belong to.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DegradationSpec, Sample, SceneSpec};
use crate::error::{Result, XmsError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub scene: SceneSpec,
    pub degradation: DegradationSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellEntry {
    pub id: String,
    pub degradation: DegradationSpec,
    pub samples: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub samples: Vec<String>,
    pub cells: Vec<CellEntry>,
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// P6 (binary RGB) with maxval 255, planes interleaved per pixel.
pub fn write_ppm(path: &Path, t: &Tensor<f64>) -> Result<()> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(XmsError::shape("write_ppm", format!("want 3 channels, got {c}")));
    }
    let mut buf = Vec::with_capacity(32 + 3 * h * w);
    buf.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
    let d = t.data();
    for i in 0..h * w {
        buf.push(quantize(d[i]));
        buf.push(quantize(d[h * w + i]));
        buf.push(quantize(d[2 * h * w + i]));
    }
    fs::write(path, buf)?;
    Ok(())
}

/// P5 (binary gray) with maxval 255; masks store 0 or 255 only.
pub fn write_pgm(path: &Path, t: &Tensor<f64>) -> Result<()> {
    let (c, h, w) = t.dims3()?;
    if c != 1 {
        return Err(XmsError::shape("write_pgm", format!("want 1 channel, got {c}")));
    }
    let mut buf = Vec::with_capacity(32 + h * w);
    buf.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    buf.extend(t.data().iter().map(|&v| quantize(v)));
    fs::write(path, buf)?;
    Ok(())
}

struct PnmHeader {
    width: usize,
    height: usize,
    data_offset: usize,
}

fn parse_pnm_header(bytes: &[u8], magic: &str, path: &Path) -> Result<PnmHeader> {
    let err = |msg: &str| XmsError::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(err("bad magic"));
    }
    // header fields: magic, width, height, maxval, separated by whitespace
    // (comments are not produced by this tool and are rejected)
    let mut fields = Vec::new();
    let mut pos = 2;
    while fields.len() < 3 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated header"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).map_err(|_| err("non-ascii header"))?;
        let value: usize = text.parse().map_err(|_| err("non-numeric header field"))?;
        fields.push(value);
    }
    if fields.len() != 3 {
        return Err(err("truncated header"));
    }
    if fields[2] != 255 {
        return Err(err("maxval must be 255"));
    }
    // exactly one whitespace byte separates the header from the payload
    pos += 1;
    Ok(PnmHeader { width: fields[0], height: fields[1], data_offset: pos })
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f64>> {
    let bytes = fs::read(path)?;
    let hdr = parse_pnm_header(&bytes, "P6", path)?;
    let (h, w) = (hdr.height, hdr.width);
    let need = hdr.data_offset + 3 * h * w;
    if bytes.len() < need {
        return Err(XmsError::Format(format!("{}: truncated pixel data", path.display())));
    }
    let px = &bytes[hdr.data_offset..need];
    let mut data = vec![0.0f64; 3 * h * w];
    for i in 0..h * w {
        data[i] = px[3 * i] as f64 / 255.0;
        data[h * w + i] = px[3 * i + 1] as f64 / 255.0;
        data[2 * h * w + i] = px[3 * i + 2] as f64 / 255.0;
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn read_pgm(path: &Path) -> Result<Tensor<f64>> {
    let bytes = fs::read(path)?;
    let hdr = parse_pnm_header(&bytes, "P5", path)?;
    let (h, w) = (hdr.height, hdr.width);
    let need = hdr.data_offset + h * w;
    if bytes.len() < need {
        return Err(XmsError::Format(format!("{}: truncated pixel data", path.display())));
    }
    let data = bytes[hdr.data_offset..need]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Tensor::new(vec![1, h, w], data)
}

/// Write one sample directory (rgb/aux/gt/meta).
pub fn write_sample(dir: &Path, sample: &Sample, scene: &SceneSpec) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_ppm(&dir.join("rgb.ppm"), &sample.rgb)?;
    write_ppm(&dir.join("aux.ppm"), &sample.aux)?;
    write_pgm(&dir.join("gt.pgm"), &sample.gt)?;
    let meta = SampleMeta {
        seed: sample.seed,
        scene: scene.clone(),
        degradation: sample.degradation.clone(),
    };
    let mut f = fs::File::create(dir.join("meta.json"))?;
    f.write_all(serde_json::to_string_pretty(&meta).expect("meta serializes").as_bytes())?;
    Ok(())
}

/// A sample loaded back from disk (quantized to 8 bits on the way through).
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub rgb: Tensor<f64>,
    pub aux: Tensor<f64>,
    pub gt: Tensor<f64>,
    pub meta: SampleMeta,
    pub dir: PathBuf,
}

pub fn read_sample(dir: &Path) -> Result<LoadedSample> {
    let rgb = read_ppm(&dir.join("rgb.ppm"))?;
    let aux = read_ppm(&dir.join("aux.ppm"))?;
    let mut gt = read_pgm(&dir.join("gt.pgm"))?;
    // masks are stored as 0/255; tolerate nothing else
    for v in gt.data_mut() {
        if *v >= 0.5 {
            *v = 1.0;
        } else if *v > 0.0 {
            return Err(XmsError::Format(format!(
                "{}: gt.pgm is not a binary mask",
                dir.display()
            )));
        }
    }
    let mut meta_str = String::new();
    fs::File::open(dir.join("meta.json"))?.read_to_string(&mut meta_str)?;
    let meta: SampleMeta =
        serde_json::from_str(&meta_str).map_err(|e| XmsError::Format(format!("meta.json: {e}")))?;
    Ok(LoadedSample { rgb, aux, gt, meta, dir: dir.to_path_buf() })
}

pub fn write_index(root: &Path, index: &DatasetIndex) -> Result<()> {
    fs::create_dir_all(root)?;
    let mut f = fs::File::create(root.join("index.json"))?;
    f.write_all(serde_json::to_string_pretty(index).expect("index serializes").as_bytes())?;
    Ok(())
}

pub fn read_index(root: &Path) -> Result<DatasetIndex> {
    let mut s = String::new();
    fs::File::open(root.join("index.json"))?.read_to_string(&mut s)?;
    serde_json::from_str(&s).map_err(|e| XmsError::Format(format!("index.json: {e}")))
}

/// Load every sample listed by the index, in index order.
pub fn load_dataset(root: &Path) -> Result<Vec<LoadedSample>> {
    let index = read_index(root)?;
    if index.samples.is_empty() {
        return Err(XmsError::Invalid(format!("dataset at {} is empty", root.display())));
    }
    index
        .samples
        .iter()
        .map(|rel| read_sample(&root.join(rel)))
        .collect()
}

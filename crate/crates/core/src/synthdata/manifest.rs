//! On-disk dataset: `manifest.csv` plus one 8-bit RGB PNG per sample.
//!
//! Columns, in order: `subject_id, eye, image_path, severity, class_label,
//! age_z, sex, smoking, v001..vNNN, event_time, event, true_log_risk`.
//! `image_path` is relative to the manifest's directory. Any dataset written
//! in this format can be loaded, synthetic or not.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array3};

use super::image::to_u8;
use super::{group_severity, DatasetBundle, Eye, FundusSample, SubjectRecord, N_DEMOGRAPHIC};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";

pub fn manifest_header(n_variants: usize) -> Vec<String> {
    let mut h: Vec<String> = ["subject_id", "eye", "image_path", "severity", "class_label", "age_z", "sex", "smoking"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((1..=n_variants).map(|i| format!("v{i:03}")));
    h.extend(["event_time", "event", "true_log_risk"].iter().map(|s| s.to_string()));
    h
}

pub fn write_png(path: &Path, image: &Array3<f64>) -> Result<()> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::Shape(format!("PNG export needs 3 channels, got {c}")));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                data.push(to_u8(image[[ch, y, x]]));
            }
        }
    }
    let io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e.to_string()));
    let mut writer = enc.write_header().map_err(io)?;
    writer.write_image_data(&data).map_err(io)?;
    writer.finish().map_err(io)?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<Array3<f64>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let bad = |m: String| Error::Validation(format!("{}: {m}", path.display()));
    let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| bad("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(bad(format!("expected 8-bit RGB, got {:?}/{:?}", info.color_type, info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = info.line_size;
    Ok(Array3::from_shape_fn((3, h, w), |(c, y, x)| buf[y * stride + x * 3 + c] as f64 / 255.0))
}

/// Writes `manifest.csv` and `images/` under `dir`; returns the manifest path.
pub fn write_dataset(bundle: &DatasetBundle, dir: &Path) -> Result<PathBuf> {
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let manifest = dir.join(MANIFEST_FILE);
    let file = File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let csv_err = |e: csv::Error| Error::io(&manifest, std::io::Error::other(e.to_string()));
    w.write_record(manifest_header(bundle.n_variants)).map_err(csv_err)?;
    let index: HashMap<&str, &SubjectRecord> =
        bundle.records.iter().map(|r| (r.subject_id.as_str(), r)).collect();
    for s in &bundle.samples {
        let rec = index
            .get(s.subject_id.as_str())
            .ok_or_else(|| Error::Validation(format!("sample of unknown subject '{}'", s.subject_id)))?;
        let rel = format!("images/{}.png", s.sample_id());
        write_png(&dir.join(&rel), &s.image)?;
        let mut row = vec![
            s.subject_id.clone(),
            s.eye.as_str().to_string(),
            rel,
            s.severity.to_string(),
            s.class_label.to_string(),
        ];
        row.extend(rec.covariates.iter().enumerate().map(|(j, v)| {
            if j == 0 {
                format!("{v}")
            } else {
                format!("{}", *v as i64)
            }
        }));
        row.push(format!("{}", rec.event_time));
        row.push(u8::from(rec.event).to_string());
        row.push(format!("{}", rec.true_log_risk));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

/// Reads and validates a manifest and all images it references.
pub fn load_dataset(manifest_path: &Path) -> Result<DatasetBundle> {
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let file = File::open(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(BufReader::new(file));
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Validation(format!("manifest header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    let n_variants = header.iter().filter(|h| is_variant_column(h)).count();
    let expected = manifest_header(n_variants);
    let unknown: Vec<&str> =
        header.iter().filter(|h| !expected.contains(h)).map(String::as_str).collect();
    if !unknown.is_empty() {
        return Err(Error::Validation(format!("manifest has unknown column(s): {}", unknown.join(", "))));
    }
    if header != expected {
        let missing: Vec<&str> =
            expected.iter().filter(|h| !header.contains(h)).map(String::as_str).collect();
        return Err(Error::Validation(if missing.is_empty() {
            "manifest columns are out of order".to_string()
        } else {
            format!("manifest is missing column(s): {}", missing.join(", "))
        }));
    }

    let mut samples = Vec::new();
    let mut records: Vec<SubjectRecord> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 1;
        let row = row.map_err(|e| Error::Validation(format!("manifest row {line}: {e}")))?;
        let bad = |m: String| Error::Validation(format!("manifest row {line}: {m}"));
        let field = |k: usize| row.get(k).unwrap_or("");
        let int = |k: usize| -> Result<i64> {
            field(k).parse::<i64>().map_err(|_| bad(format!("column '{}' is not an integer: '{}'", expected[k], field(k))))
        };
        let float = |k: usize| -> Result<f64> {
            field(k).parse::<f64>().map_err(|_| bad(format!("column '{}' is not a number: '{}'", expected[k], field(k))))
        };

        let subject_id = field(0).to_string();
        if subject_id.is_empty() {
            return Err(bad("empty subject_id".into()));
        }
        let eye = Eye::parse(field(1)).ok_or_else(|| bad(format!("eye must be left|right, got '{}'", field(1))))?;
        let severity = int(3)?;
        if !(1..=12).contains(&severity) {
            return Err(bad(format!("severity {severity} outside 1..=12")));
        }
        let severity = severity as u8;
        let class_label = int(4)?;
        if class_label != i64::from(group_severity(severity)?) {
            return Err(bad(format!("class_label {class_label} does not match severity {severity}")));
        }
        let mut cov = Vec::with_capacity(N_DEMOGRAPHIC + n_variants);
        cov.push(float(5)?);
        let sex = int(6)?;
        if !(0..=1).contains(&sex) {
            return Err(bad(format!("sex must be 0 or 1, got {sex}")));
        }
        cov.push(sex as f64);
        let smoking = int(7)?;
        if !(0..=2).contains(&smoking) {
            return Err(bad(format!("smoking must be 0, 1 or 2, got {smoking}")));
        }
        cov.push(smoking as f64);
        for k in 8..8 + n_variants {
            let d = int(k)?;
            if !(0..=2).contains(&d) {
                return Err(bad(format!("dosage {} = {d} outside {{0,1,2}}", expected[k])));
            }
            cov.push(d as f64);
        }
        let tail = 8 + n_variants;
        let event_time = float(tail)?;
        if !(event_time > 0.0 && event_time.is_finite()) {
            return Err(bad(format!("event_time must be > 0, got {event_time}")));
        }
        let event = match int(tail + 1)? {
            0 => false,
            1 => true,
            e => return Err(bad(format!("event must be 0 or 1, got {e}"))),
        };
        let true_log_risk = if field(tail + 2).is_empty() { f64::NAN } else { float(tail + 2)? };

        let img_path = base.join(field(2));
        if !img_path.is_file() {
            return Err(bad(format!("missing image file {}", img_path.display())));
        }
        let image = read_png(&img_path)?;

        let record = SubjectRecord {
            subject_id: subject_id.clone(),
            covariates: Array1::from_vec(cov),
            event_time,
            event,
            true_log_risk,
        };
        match by_id.get(&subject_id) {
            Some(&j) => {
                let prev = &records[j];
                let same = prev.covariates == record.covariates
                    && prev.event_time == record.event_time
                    && prev.event == record.event;
                if !same {
                    return Err(bad(format!("subject '{subject_id}' has conflicting subject-level fields")));
                }
            }
            None => {
                by_id.insert(subject_id.clone(), records.len());
                records.push(record);
            }
        }
        samples.push(FundusSample { image, severity, class_label: class_label as u8, subject_id, eye });
    }
    let bundle = DatasetBundle { samples, records, n_variants, manifest_path: Some(manifest_path.to_path_buf()) };
    bundle.validate()?;
    Ok(bundle)
}

fn is_variant_column(h: &str) -> bool {
    h.len() > 1 && h.starts_with('v') && h[1..].chars().all(|c| c.is_ascii_digit())
}

pub fn manifest_hash(manifest_path: &Path) -> Result<String> {
    crate::nn::checkpoint::file_hash(manifest_path)
}

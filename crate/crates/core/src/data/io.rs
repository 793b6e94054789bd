//! On-disk layout of a recorded domain.
//!
//! A domain directory holds `manifest.txt` (`key = value` lines) and one file
//! per recording: `*.f32` (little-endian f32, channel-major) or `*.csv` /
//! `*.txt` (one row per channel, comma or whitespace separated, `nan` marks a
//! missing value). An optional `<stem>.labels` file holds either one label for
//! the whole recording or one label per time step.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{segment_sliding_window, DomainDataset, WindowingSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct DomainManifest {
    pub name: String,
    pub channels: usize,
    pub classes: usize,
    pub labeled: bool,
    pub window: Option<WindowingSpec>,
}

impl DomainManifest {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            what: "domain manifest",
            path: path.to_path_buf(),
            detail,
        };
        let mut kv = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {}: expected key = value", n + 1)))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let num = |key: &str| -> Result<Option<usize>> {
            kv.get(key)
                .map(|v| v.parse().map_err(|_| bad(format!("`{key}` is not a count: {v}"))))
                .transpose()
        };
        let need = |key: &str| -> Result<usize> { num(key)?.ok_or_else(|| bad(format!("missing `{key}`"))) };
        let labeled = match kv.get("labeled").map(String::as_str) {
            None | Some("true") => true,
            Some("false") => false,
            Some(v) => return Err(bad(format!("`labeled` must be true or false, got {v}"))),
        };
        let window = match num("window")? {
            Some(w) => Some(WindowingSpec::new(w, num("stride")?.unwrap_or(w))),
            None => None,
        };
        Ok(Self {
            name: kv.get("name").cloned().unwrap_or_else(|| {
                path.parent()
                    .and_then(|p| p.file_name())
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "domain".into())
            }),
            channels: need("channels")?,
            classes: need("classes")?,
            labeled,
            window,
        })
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "name = {}\nchannels = {}\nclasses = {}\nlabeled = {}\n",
            self.name, self.channels, self.classes, self.labeled
        );
        if let Some(w) = &self.window {
            s += &format!("window = {}\nstride = {}\n", w.window_size, w.stride);
        }
        s
    }
}

fn read_record(path: &Path, channels: usize) -> Result<Tensor> {
    let bad = |detail: String| Error::Format {
        what: "recording",
        path: path.to_path_buf(),
        detail,
    };
    let values: Vec<f64> = if path.extension().is_some_and(|e| e == "f32") {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() % 4 != 0 {
            return Err(bad(format!(
                "{} bytes is not a whole number of f32 values",
                bytes.len()
            )));
        }
        bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect()
    } else {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut rows = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let row = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<f64>().map_err(|_| bad(format!("bad value `{t}`"))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        if rows.len() != channels || rows.iter().any(|r| r.len() != rows[0].len()) {
            return Err(bad(format!("expected {channels} rows of equal length")));
        }
        rows.concat()
    };
    if values.is_empty() || values.len() % channels != 0 {
        return Err(bad(format!(
            "{} values do not split into {channels} channels",
            values.len()
        )));
    }
    let len = values.len() / channels;
    Tensor::new(&[channels, len], values)
}

fn read_labels(path: &Path) -> Result<Option<Vec<usize>>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.split_whitespace()
        .map(|t| {
            t.parse().map_err(|_| Error::Format {
                what: "label file",
                path: path.to_path_buf(),
                detail: format!("bad label `{t}`"),
            })
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

fn recordings(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| {
                e == "f32" || e == "csv" || (e == "txt" && p.file_name().is_some_and(|n| n != "manifest.txt"))
            })
        })
        .collect();
    out.sort();
    Ok(out)
}

/// Loads every recording in `dir` as one domain (all samples in train).
pub fn load_domain(dir: &Path) -> Result<DomainDataset> {
    let manifest_path = dir.join("manifest.txt");
    if !manifest_path.exists() {
        return Err(Error::MissingInput {
            what: format!("domain manifest {}", manifest_path.display()),
            hint: "write one with `tsda generate-synthetic` or prepare a recording directory".into(),
        });
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest = DomainManifest::parse(&text, &manifest_path)?;
    let files = recordings(dir)?;
    if files.is_empty() {
        return Err(Error::EmptySplit(format!("no recordings in {}", dir.display())));
    }
    let mut samples = Vec::new();
    for path in &files {
        let series = read_record(path, manifest.channels)?;
        let len = series.dim(1);
        let label_path = path.with_extension("labels");
        let labels = read_labels(&label_path)?;
        let track = match labels.as_deref() {
            None => None,
            Some([l]) => Some(vec![*l; len]),
            Some(t) if t.len() == len => Some(t.to_vec()),
            Some(t) => {
                return Err(Error::Format {
                    what: "label file",
                    path: label_path,
                    detail: format!("{} labels for {len} steps", t.len()),
                })
            }
        };
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let spec = manifest.window.unwrap_or(WindowingSpec::new(len, len));
        samples.extend(segment_sliding_window(&name, &series, track.as_deref(), &spec)?);
    }
    if manifest.labeled && samples.iter().any(|s| s.label.is_none()) {
        return Err(Error::MissingInput {
            what: format!("labels for labeled domain `{}`", manifest.name),
            hint: "add one <recording>.labels file per recording".into(),
        });
    }
    DomainDataset::new(manifest.name, samples, manifest.classes, manifest.labeled)
}

/// Writes one `.f32` recording (plus `.labels`) per sample.
pub fn write_domain(dir: &Path, dataset: &DomainDataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = DomainManifest {
        name: dataset.name.clone(),
        channels: dataset.channels(),
        classes: dataset.num_classes,
        labeled: dataset.labeled,
        window: None,
    };
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest.render()).map_err(|e| Error::io(&path, e))?;
    for (i, s) in dataset.samples().iter().enumerate() {
        let path = dir.join(format!("rec_{i:05}.f32"));
        let bytes: Vec<u8> = s.values.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        if let Some(l) = s.label {
            let path = path.with_extension("labels");
            fs::write(&path, format!("{l}\n")).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}
